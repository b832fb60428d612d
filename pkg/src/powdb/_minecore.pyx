# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled nonce-search kernel over OpenSSL's SHA-256.

The whole search loop runs in C without touching the GIL: the block prefix
is absorbed into one context which is struct-copied per nonce, then only the
decimal nonce suffix is hashed.
"""

from libc.stdio cimport snprintf
from libc.string cimport strlen

cdef extern from "openssl/sha.h":
    ctypedef struct SHA256_CTX:
        pass
    int SHA256_Init(SHA256_CTX *c) nogil
    int SHA256_Update(SHA256_CTX *c, const void *data, size_t length) nogil
    int SHA256_Final(unsigned char *md, SHA256_CTX *c) nogil


cdef inline bint _meets(const unsigned char *md, int bits) nogil:
    cdef int full = bits >> 3
    cdef int rem = bits & 7
    cdef int i
    for i in range(full):
        if md[i] != 0:
            return False
    if rem and (md[full] >> (8 - rem)) != 0:
        return False
    return True


def search_nonce(bytes prefix, int difficulty_bits,
                 unsigned long long start_nonce, unsigned long long count):
    """First (nonce, digest) in [start_nonce, start_nonce+count) meeting the
    difficulty, or None if the window holds no hit."""
    cdef SHA256_CTX base, ctx
    cdef unsigned char md[32]
    cdef char buf[24]
    cdef const unsigned char *pdata = prefix
    cdef size_t plen = len(prefix)
    cdef unsigned long long nonce = start_nonce
    cdef unsigned long long remaining = count
    cdef int bits = difficulty_bits
    cdef bint found = False

    if difficulty_bits < 0 or difficulty_bits > 32:
        raise ValueError("difficulty must be in [0, 32]")

    SHA256_Init(&base)
    SHA256_Update(&base, pdata, plen)

    with nogil:
        while remaining > 0:
            ctx = base
            snprintf(buf, sizeof(buf), "%llu", nonce)
            SHA256_Update(&ctx, buf, strlen(buf))
            SHA256_Final(md, &ctx)
            if _meets(md, bits):
                found = True
                break
            nonce += 1
            remaining -= 1

    if not found:
        return None
    return nonce, bytes(md[:32])
