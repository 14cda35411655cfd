"""
Utility modules for PRDL.
"""

from .blobs import ByteReader, read_blob_file, write_blob_file
from .parallel import ordered_map
from .seeding import derive_rng, draw_seed

__all__ = [
    "ByteReader",
    "read_blob_file",
    "write_blob_file",
    "ordered_map",
    "derive_rng",
    "draw_seed",
]
