# Tests package for PRDL.
