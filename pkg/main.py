import argparse, asyncio, csv, logging, os, sys

import numpy as np

from src.ppimce.ckks import decrypt_decode, encode, encrypt, keygen, preset
from src.ppimce.circuits import GC_BENCH_CORPUS, bits_to_int, export_corpus, load_circuit
from src.ppimce.compiler import (
    HeMachine, HeOp, HeOpKind, HeProgram, LayerGraph, compile_he, compile_netlist, evaluate_he, load_model,
    simulate_garble,
)
from src.ppimce.config import DispatchConfig, ProtocolConfig, ensure_data_dir, load_profile
from src.ppimce.dispatcher import run_program
from src.ppimce.errors import PpimceError
from src.ppimce.garble import garble, garbled_mismatches, run_garbled
from src.ppimce.isa import assemble
from src.ppimce.metrics import ComponentBudget, report, scale
from src.ppimce.protocol import load_bandwidths, plaintext_inference, run_inference
from src.ppimce import runstore

logger = logging.getLogger("ppimce")


def _csv_out(header, rows):
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)


def _parse_bits(text: str, n: int):
    text = text.strip()
    if set(text) <= {"0", "1"} and len(text) == n:
        return [int(c) for c in text]
    raise PpimceError(f"expected {n} bits as a 0/1 string, got {len(text)} characters")


async def _store(name, kind, config, report_json, records=None, ledger=None):
    ensure_data_dir()
    await runstore.init_runs_db()
    run_id = await runstore.create_run(name, kind, config)
    if records is not None:
        await runstore.write_schedule(run_id, records)
    if ledger is not None:
        await runstore.write_ledger(run_id, ledger.counters, ledger.messages)
    await runstore.write_report(run_id, report_json)
    return run_id


# ------------------ subcommands ------------------

def cmd_garble(args) -> int:
    circuit = load_circuit(args.circuit)
    rng = np.random.default_rng(args.seed)
    if args.simulate:
        sim = simulate_garble(circuit, rng=rng, profile=load_profile(args.profile),
                              config=DispatchConfig(units=args.units))
        gc = sim.garbled
        print(f"# simulated on {args.units} units: {sim.report.cycles} cycles, "
              f"{sim.report.latency_s * 1e6:.3f} us", file=sys.stderr)
    else:
        gc, _ = garble(circuit, rng=rng)
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(gc.to_bytes())
    _csv_out(["circuit", "gates", "and", "table_bytes"],
             [[circuit.name, len(circuit.gates), gc.and_count, gc.table_bytes]])
    return 0


def cmd_eval(args) -> int:
    circuit = load_circuit(args.circuit)
    bits = _parse_bits(args.inputs, circuit.num_inputs)
    rng = np.random.default_rng(args.seed)
    out = run_garbled(circuit, bits, rng)
    if out != circuit.evaluate_bits(bits):
        print("garbled evaluation disagrees with plaintext evaluation", file=sys.stderr)
        return 1
    words, pos = [], 0
    for size in circuit.output_sizes:
        words.append(bits_to_int(out[pos:pos + size]))
        pos += size
    print(" ".join(str(w) for w in words))
    return 0


def _he_program(op: str, k: int) -> HeProgram:
    if op == "add":
        return HeProgram([HeOp(HeOpKind.ADD, "out", "a", "b")], ("a", "b"))
    if op == "mul":
        return HeProgram([HeOp(HeOpKind.MUL, "out", "a", "b")], ("a", "b"))
    return HeProgram([HeOp(HeOpKind.ROTATE, "out", "a", k=k)], ("a", "b"))


def cmd_he_bench(args) -> int:
    params = preset(args.preset, degree=args.n)
    rng = np.random.default_rng(args.seed)
    program = _he_program(args.op, args.k)
    profile = load_profile(args.profile)
    compiled = compile_he(program, params, profile)
    keys = keygen(params, rng, rotations=program.rotations())
    x = rng.uniform(-1, 1, params.slots)
    y = rng.uniform(-1, 1, params.slots)
    inputs = {"a": encrypt(encode(x, params), keys, rng), "b": encrypt(encode(y, params), keys, rng)}
    result = evaluate_he(program, inputs, keys)["out"]
    expected = {"add": x + y, "mul": x * y, "rot": np.roll(x, -args.k)}[args.op]
    err = float(np.max(np.abs(np.real(decrypt_decode(result, keys)) - expected)))
    ok = err < 2 ** -10
    if args.simulate:
        sim = HeMachine(params, profile).run(compiled, inputs, keys)["out"]
        ok = ok and all(np.array_equal(a, b) for a, b in zip(sim.c0.channels + sim.c1.channels,
                                                             result.c0.channels + result.c1.channels))
    _csv_out(["op", "n", "limbs", "cycles", "latency_s", "max_error", "check"],
             [[args.op, params.degree, params.levels, compiled.cycles,
               f"{compiled.cycles / profile.frequency_hz:.9g}", f"{err:.3g}", "pass" if ok else "fail"]])
    return 0 if ok else 1


def cmd_gc_bench(args) -> int:
    names = GC_BENCH_CORPUS if args.circuit == "all" else [args.circuit]
    profile = load_profile(args.profile or "gc-bench")
    config = DispatchConfig(units=args.units, early_release=args.early_release)
    rng = np.random.default_rng(args.seed)
    rows, failed = [], 0
    for name in names:
        circuit = load_circuit(name)
        compiled = compile_netlist(circuit, profile)
        trace, cost = run_program(compiled.stream, config, profile)
        stats = circuit.stats()
        util = sum(cost.utilization) / len(cost.utilization) if cost.utilization else 0.0
        rows.append([name, stats["gates"], stats["and"], stats["xor"] + stats["inv"], args.units, cost.cycles,
                     f"{cost.latency_s:.9g}", f"{util:.4f}", f"{cost.energy_pj:.6g}"])
        if args.verify:
            bad = garbled_mismatches(circuit, rng.integers(0, 2, (args.verify, circuit.num_inputs)), rng)
            failed += bad
            rows[-1].append("pass" if bad == 0 else f"fail:{bad}")
    header = ["circuit", "gates", "and", "free", "units", "cycles", "latency_s", "utilization", "energy_pj"]
    _csv_out(header + (["check"] if args.verify else []), rows)
    return 1 if failed else 0


def cmd_simulate(args) -> int:
    with open(args.asm, "r", encoding="utf-8") as fh:
        stream = assemble(fh.read())
    profile = load_profile(args.profile)
    config = DispatchConfig(units=args.units, early_release=args.early_release)
    trace, cost = run_program(stream, config, profile, he_n=args.he_n)
    if args.trace:
        trace.write_jsonl(args.trace)
    rep = report(cost, name=os.path.basename(args.asm), budget=ComponentBudget.from_profile(profile))
    if args.store:
        run_id = asyncio.run(_store(args.store, "simulate", {"asm": args.asm, "units": args.units},
                                    rep.to_json(), trace.records))
        logger.info("stored run %d", run_id)
    print(rep.to_json() if args.format == "json" else rep.to_csv(), end="" if args.format == "csv" else "\n")
    return 0


def _default_mlp(rng: np.random.Generator) -> LayerGraph:
    w1, b1 = rng.uniform(-1, 1, (4, 8)), rng.uniform(-0.5, 0.5, 4)
    w2, b2 = rng.uniform(-1, 1, (2, 4)), rng.uniform(-0.5, 0.5, 2)
    return LayerGraph.mlp([w1, w2], [b1, b2], name="mlp-8-4-2")


def cmd_ppml(args) -> int:
    rng = np.random.default_rng(args.seed)
    graph = load_model(args.model) if args.model else _default_mlp(rng)
    if args.input:
        x = np.array([float(v) for v in args.input.split(",")])
    else:
        x = rng.uniform(-1, 1, graph.input_size)
    config = ProtocolConfig(seed=args.seed, transcript_path=args.transcript or "")
    if args.preset:
        config.he_preset = args.preset
    bandwidths = load_bandwidths(args.bandwidths) if args.bandwidths else config.bandwidths
    profile = load_profile(args.profile) if args.profile else None
    result = run_inference(graph, x, config, rng=rng, profile=profile)
    rep = report(result.report, result.ledger.to_dict(), bandwidths=bandwidths, name=graph.name)
    plain = plaintext_inference(graph, x)
    logger.info("prediction %d (plaintext %d), max deviation from plaintext %.3g", result.prediction,
                int(np.argmax(plain)), float(np.max(np.abs(result.output - plain))))
    if args.store:
        run_id = asyncio.run(_store(args.store, "ppml", {"model": args.model or graph.name, "seed": args.seed},
                                    rep.to_json(), ledger=result.ledger))
        logger.info("stored run %d", run_id)
    print(rep.to_json() if args.format == "json" else rep.to_csv(), end="" if args.format == "csv" else "\n")
    return 0


def cmd_corpus(args) -> int:
    names = GC_BENCH_CORPUS if args.circuit == "all" else [args.circuit]
    manifest = export_corpus(args.out, names)
    _csv_out(["circuit", "gates", "and", "xor", "inv", "inputs", "outputs"],
             [[name] + [s[k] for k in ("gates", "and", "xor", "inv", "inputs", "outputs")]
              for name, s in manifest.items()])
    return 0


def cmd_report(args) -> int:
    if args.run:
        run_id = asyncio.run(runstore.resolve_run(args.run))
        text = asyncio.run(runstore.read_report(run_id))
        if text is None:
            raise PpimceError(f"run {args.run} has no stored report")
        print(text)
        return 0
    budget = ComponentBudget.from_profile(load_profile(args.profile))
    scaled = scale(budget, budget.technology_nm, args.node)
    rows = [[r["component"], r["count"], f"{r['area_mm2']:.4f}", f"{r['power_w']:.4f}"] for r in scaled.breakdown()]
    rows.append(["total", "", f"{scaled.area_total:.1f}", f"{scaled.power_total:.1f}"])
    _csv_out(["component", "count", "area_mm2", "power_w"], rows)
    print(f"# calibrated constants: {scaled.provenance}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ppimce",
        description="Simulator for an in-memory HE/GC accelerator and hybrid private inference",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s gc-bench --circuit relu32 --units 16
  %(prog)s he-bench --op mul --n 4096
  %(prog)s eval --circuit adder4 --inputs 10100110
  %(prog)s simulate program.asm --units 2 --trace trace.jsonl
  %(prog)s ppml --seed 7 --store mlp-run
  %(prog)s corpus --out corpus
  %(prog)s report --node 5
        """
    )
    p.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    p.add_argument("--quiet", "-q", action="store_true", help="Warnings and errors only")
    p.add_argument("--profile", type=str, default=None,
                   help="Architecture profile preset or JSON file (default: $PPIMCE_PROFILE or 'default')")
    p.add_argument("--seed", type=int, default=0, help="Seed for every random draw (default: 0)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("garble", help="Garble a circuit; optionally on the simulated GC units")
    g.add_argument("--circuit", required=True, help="Benchmark name or Bristol file")
    g.add_argument("--out", type=str, default="", help="Write the garbled-table container here")
    g.add_argument("--simulate", action="store_true", help="Garble through the C-Inst pipeline")
    g.add_argument("--units", type=int, default=16, help="GC units when simulating (default: 16)")
    g.set_defaults(func=cmd_garble)

    e = sub.add_parser("eval", help="Garble, evaluate and decode one input vector")
    e.add_argument("--circuit", required=True, help="Benchmark name or Bristol file")
    e.add_argument("--inputs", required=True, help="Input bits as a 0/1 string, wire 0 first")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("he-bench", help="Cycle estimate and functional check of one HE operation")
    h.add_argument("--op", choices=["add", "mul", "rot"], required=True)
    h.add_argument("--n", type=int, default=4096, help="Ring degree (default: 4096)")
    h.add_argument("--k", type=int, default=1, help="Rotation amount for --op rot (default: 1)")
    h.add_argument("--preset", default="desk", help="CKKS parameter preset (default: desk)")
    h.add_argument("--simulate", action="store_true",
                   help="Also run the lowered program on the core array (small N only)")
    h.set_defaults(func=cmd_he_bench)

    b = sub.add_parser("gc-bench", help="Dispatch benchmark circuits on the GC units")
    b.add_argument("--circuit", default="all", help=f"One of {', '.join(GC_BENCH_CORPUS)} or 'all'")
    b.add_argument("--units", type=int, default=16, help="GC units (default: 16)")
    b.add_argument("--early-release", action="store_true", help="Free units in the completion cycle")
    b.add_argument("--verify", type=int, default=0, metavar="N",
                   help="Garble each circuit once and check N random input vectors against plaintext (uses --seed)")
    b.set_defaults(func=cmd_gc_bench)

    s = sub.add_parser("simulate", help="Dispatch a C-Inst assembly file")
    s.add_argument("asm", help="C-Inst assembly file")
    s.add_argument("--units", type=int, default=16)
    s.add_argument("--he-n", type=int, default=None, help="Polynomial length for HE instructions")
    s.add_argument("--early-release", action="store_true")
    s.add_argument("--trace", type=str, default="", help="Write the schedule as JSON lines")
    s.add_argument("--store", type=str, default="", help="Keep the run in the run store under this name")
    s.add_argument("--format", choices=["json", "csv"], default="json")
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("ppml", help="Run hybrid private inference on a model")
    m.add_argument("--model", type=str, default="", help="JSON model descriptor (default: random 8-4-2 MLP)")
    m.add_argument("--input", type=str, default="", help="Comma-separated input values (default: random)")
    m.add_argument("--preset", type=str, default="", help="CKKS preset (default: $PPIMCE_HE_PRESET or 'ppml')")
    m.add_argument("--bandwidths", type=str, default="", help="JSON bandwidth list in bits/s")
    m.add_argument("--transcript", type=str, default="", help="Write <path>.client and <path>.server transcripts")
    m.add_argument("--store", type=str, default="", help="Keep the run in the run store under this name")
    m.add_argument("--format", choices=["json", "csv"], default="json")
    m.set_defaults(func=cmd_ppml)

    c = sub.add_parser("corpus", help="Write the GC benchmark corpus as Bristol files with a gate-count manifest")
    c.add_argument("--out", default="corpus", help="Output directory (default: corpus)")
    c.add_argument("--circuit", default="all", help=f"One of {', '.join(GC_BENCH_CORPUS)} or 'all'")
    c.set_defaults(func=cmd_corpus)

    r = sub.add_parser("report", help="Re-emit a stored report, or the scaled area/power budget")
    r.add_argument("--run", type=str, default="", help="Stored run id or name")
    r.add_argument("--node", type=int, default=5, help="Target technology node in nm (default: 5)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PpimceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
