"""Stdlib-only model server speaking the vlmadv line protocol.

A second, independent implementation of the wire contract in
docs/PROTOCOL.md: a scalar-math twin of the toy linear model served over
newline-delimited JSON on stdio or TCP. No numpy, no vlmadv import; the
only shared surface is the protocol itself and the documented PRNG
(docs/DATA_FORMATS.md), which makes this package a reference for porting
the server side to another language and a permanent cross-check that the
protocol documentation is complete.

Run it:  python3 -m sidecar --seed 7 --shape 3,2,2 --classes 4
"""

from .twin import CLASS_WORDS, LinearTwin, ModelError, f32
from .server import SidecarServer, main

__all__ = [
    "CLASS_WORDS",
    "LinearTwin",
    "ModelError",
    "SidecarServer",
    "f32",
    "main",
]

__version__ = "0.1.0"
