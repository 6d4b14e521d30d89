"""Compiled metric kernels (``_kernels``) and their pure-NumPy twins (``fallback``)."""
