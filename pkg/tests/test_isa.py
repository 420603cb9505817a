import numpy as np
import pytest

from src.ppimce.errors import CapacityError, DecodeError, DomainError, ParseError
from src.ppimce.isa import (
    ADDR_BITS, CEM_FIELD_BITS, CEM_UNITS, LUT_BITS, NOP, SHIFTER_BITS, CemField, CemFunc, CInst, CInstKind,
    LutMode, MicroInstruction, ShiftFunc, assemble, decode_cinst, decode_micro, disassemble, encode_cinst,
    encode_micro, pack_program, unpack_program,
)
from src.ppimce.microcode import (
    FREEXOR_CYCLES, HALFGATE_CYCLES, ModulusShape, cost_table, gc_program, lut_write, microprogram_for,
    uim_write,
)
from src.ppimce.config import ArchProfile


def random_micro(rng: np.random.Generator) -> MicroInstruction:
    cems = []
    for _ in range(CEM_UNITS):
        if rng.integers(2):
            cems.append(CemField(True, CemFunc(int(rng.integers(8))), int(rng.integers(1 << ADDR_BITS)),
                                 int(rng.integers(1 << ADDR_BITS))))
        else:
            cems.append(CemField())
    lut = bool(rng.integers(2))
    shift = bool(rng.integers(2))
    return MicroInstruction(lut, LutMode(int(rng.integers(2))) if lut else LutMode.LOOKUP,
                            shift, ShiftFunc(int(rng.integers(len(ShiftFunc)))) if shift else ShiftFunc.NOP,
                            tuple(cems))


class TestCInstEncoding:
    def test_roundtrip(self):
        inst = CInst(CInstKind.FREEXOR, 0x12, 0x10, 0x11)
        assert decode_cinst(encode_cinst(inst)) == inst

    def test_injective_over_kinds(self, rng):
        seen = {}
        for kind in CInstKind:
            for _ in range(50):
                inst = CInst(kind, *(int(v) for v in rng.integers(0, 32, 3)))
                word = encode_cinst(inst)
                assert seen.setdefault(word, inst) == inst
                assert decode_cinst(word) == inst
        assert len(CInstKind) == 10

    def test_reserved_pattern(self):
        word = encode_cinst(CInst(CInstKind.FREEXOR)) | (0b1111111 << 25)
        with pytest.raises(DecodeError):
            decode_cinst(word)

    def test_wrong_opcode(self):
        with pytest.raises(DecodeError):
            decode_cinst(0x33)

    def test_register_field_overflow(self):
        with pytest.raises(DomainError):
            encode_cinst(CInst(CInstKind.POLYADD, 32, 0, 0))


class TestAssembly:
    def test_assemble_and_disassemble(self):
        text = "# gates\nFREEXOR 0x100, 0x110, 0x120\nhalfgate x4, 8, 12  # trailing comment\n\nLUT_WRITE 1\n"
        stream = assemble(text)
        assert [i.kind for i in stream] == [CInstKind.FREEXOR, CInstKind.HALFGATE, CInstKind.LUT_WRITE]
        assert stream[1] == CInst(CInstKind.HALFGATE, 4, 8, 12)
        assert assemble(disassemble(stream)) == stream

    def test_unknown_mnemonic_reports_line(self):
        with pytest.raises(ParseError) as exc:
            assemble("FREEXOR 1, 2, 3\nBOGUS 1, 2, 3\n")
        assert exc.value.line == 2

    def test_too_many_operands(self):
        with pytest.raises(ParseError):
            assemble("POLYADD 1, 2, 3, 4")


class TestMicroWord:
    def test_field_widths(self):
        assert LUT_BITS + SHIFTER_BITS + CEM_UNITS * CEM_FIELD_BITS == 128

    def test_nop_is_zero(self):
        assert encode_micro(NOP) == 0
        assert decode_micro(0) == NOP
        assert NOP.is_nop

    def test_roundtrip_fuzz(self, rng):
        for _ in range(10 ** 5):
            mi = random_micro(rng)
            word = encode_micro(mi)
            assert 0 <= word < 1 << 128
            assert decode_micro(word) == mi

    def test_invalid_shifter_code(self):
        with pytest.raises(DecodeError):
            decode_micro((1 << 125) | (31 << 120))

    def test_disabled_field_must_be_zero(self):
        with pytest.raises(DecodeError):
            decode_micro(1 << 100)

    def test_program_container(self, rng):
        words = [random_micro(rng) for _ in range(20)]
        base, back = unpack_program(pack_program(words, base=64))
        assert base == 64 and back == words
        with pytest.raises(DecodeError):
            unpack_program(b"XXXX" + pack_program(words)[4:])


class TestMicroPrograms:
    def test_gc_lengths(self):
        assert microprogram_for(CInstKind.FREEXOR).length == FREEXOR_CYCLES == 3
        assert microprogram_for(CInstKind.HALFGATE).length == HALFGATE_CYCLES == 45

    def test_update_kinds_have_no_program(self):
        with pytest.raises(DomainError):
            microprogram_for(CInstKind.UIM_WRITE)

    def test_he_needs_moduli(self):
        with pytest.raises(DomainError):
            microprogram_for(CInstKind.POLYADD)

    def test_cost_table(self):
        table = cost_table()
        assert table["FREEXOR"] == 3 and table["HALFGATE"] == 45
        assert table["POLYMUL"] > table["POLYADD"]
        assert table["NTT"] > table["POLYMUL"]

    def test_uim_capacity(self):
        tiny = ArchProfile(uim_bytes=32)
        with pytest.raises(CapacityError):
            uim_write(gc_program(CInstKind.HALFGATE), tiny)

    def test_lut_capacity(self):
        with pytest.raises(CapacityError):
            lut_write(12, range(256))
        with pytest.raises(CapacityError):
            lut_write(0, range(255))

    def test_shape_requires_uniform_limbs(self):
        with pytest.raises(DomainError):
            ModulusShape.of([17, 15])
