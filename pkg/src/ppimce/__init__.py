from .compiler import compile_he, compile_netlist, compile_network
from .dispatcher import run_program
from .protocol import run_inference
