# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the voxel hash, mapping table and per-voxel ID lists."""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, realloc, free
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()

BACKEND = "cython"

ctypedef int64_t i64

cdef extern from *:
    """
    #if defined(__GNUC__) || defined(__clang__)
    #define MF_PREFETCH(p) __builtin_prefetch((const void*)(p))
    #else
    #define MF_PREFETCH(p) ((void)0)
    #endif
    """
    void MF_PREFETCH(const void* p) nogil

cdef enum:
    # batch loops request the memory of element i + _AHEAD while working on i;
    # large tables live outside the cache and each access is an independent miss
    _AHEAD = 8


cdef inline uint64_t _mix(uint64_t x) nogil:
    # splitmix64 finalizer
    x ^= x >> 30
    x *= <uint64_t>0xbf58476d1ce4e5b9
    x ^= x >> 27
    x *= <uint64_t>0x94d049bb133111eb
    x ^= x >> 31
    return x


cdef extern from *:
    """
    #include <stdlib.h>
    #include <string.h>
    #if defined(__linux__)
    #include <sys/mman.h>
    #endif
    /* Buffers past a few MB are placed on 2 MB boundaries and, on Linux, marked
       for transparent huge pages: random probes into big tables otherwise pay a
       page walk per access once the 4 KB mappings outgrow the TLB. */
    #define MF_HUGE (2u << 20)
    static void* mf_realloc(void* old, size_t old_bytes, size_t new_bytes) {
        void* out;
        if (new_bytes < 2 * MF_HUGE)
            return realloc(old, new_bytes);
        if (posix_memalign(&out, MF_HUGE, new_bytes) != 0)
            return NULL;
    #if defined(__linux__) && defined(MADV_HUGEPAGE)
        madvise(out, new_bytes, MADV_HUGEPAGE);
    #endif
        if (old != NULL) {
            memcpy(out, old, old_bytes < new_bytes ? old_bytes : new_bytes);
            free(old);
        }
        return out;
    }
    """
    void* mf_realloc(void* old, size_t old_bytes, size_t new_bytes) nogil


cdef i64* _grow(i64* buf, Py_ssize_t old, Py_ssize_t new, i64 fill) except NULL:
    cdef i64* out = <i64*>mf_realloc(buf, old * sizeof(i64), new * sizeof(i64))
    cdef Py_ssize_t i
    if out == NULL:
        raise MemoryError()
    for i in range(old, new):
        out[i] = fill
    return out


cdef enum:
    # voxels are hashed in 4x4x4 blocks; a block's cells occupy 64 adjacent table positions
    _LOCAL_BITS = 6


cdef inline uint64_t _bucket(i64 key) nogil:
    cdef uint64_t k = <uint64_t>key
    cdef uint64_t local = ((k >> 42) & 3) << 4 | ((k >> 21) & 3) << 2 | (k & 3)
    cdef uint64_t block = k & ~((<uint64_t>3 << 42) | (<uint64_t>3 << 21) | <uint64_t>3)
    return (_mix(block) << _LOCAL_BITS) | local


cdef class KeyIndex:
    """Open-addressing (linear probe) table from packed int64 keys to dense slots.

    Entries interleave (key, slot) so a probe touches one cache line.
    """

    cdef i64* _table  # 2 * _cap: key, slot (-1 = empty)
    cdef i64* _order
    cdef Py_ssize_t _cap
    cdef Py_ssize_t _n
    cdef Py_ssize_t _order_cap

    def __cinit__(self, Py_ssize_t capacity=1024):
        cdef Py_ssize_t cap = 128
        while cap < 2 * capacity:
            cap <<= 1
        self._cap = cap
        self._n = 0
        self._table = _alloc_table(cap)
        self._order_cap = 16
        self._order = _grow(NULL, 0, self._order_cap, 0)

    def __dealloc__(self):
        free(self._table)
        free(self._order)

    def __len__(self):
        return self._n

    cdef void _rehash(self, Py_ssize_t newcap) except *:
        cdef i64* nt = _alloc_table(newcap)
        cdef Py_ssize_t i
        cdef uint64_t h, mask = newcap - 1
        cdef i64 key
        for i in range(self._n):
            key = self._order[i]
            h = _bucket(key) & mask
            while nt[2 * h + 1] >= 0:
                h = (h + 1) & mask
            nt[2 * h] = key
            nt[2 * h + 1] = i
        free(self._table)
        self._table = nt
        self._cap = newcap

    cdef inline i64 _find_or_add(self, i64 key, bint add) except -2:
        cdef uint64_t mask = self._cap - 1
        cdef uint64_t h = _bucket(key) & mask
        cdef i64 s
        while True:
            s = self._table[2 * h + 1]
            if s < 0:
                break
            if self._table[2 * h] == key:
                return s
            h = (h + 1) & mask
        if not add:
            return -1
        s = self._n
        self._table[2 * h] = key
        self._table[2 * h + 1] = s
        if self._n >= self._order_cap:
            self._order = _grow(self._order, self._order_cap, 2 * self._order_cap, 0)
            self._order_cap *= 2
        self._order[s] = key
        self._n += 1
        if 2 * self._n > self._cap:
            self._rehash(2 * self._cap)
        return s

    def get_or_insert(self, keys):
        cdef const i64[::1] k = np.ascontiguousarray(keys, dtype=np.int64)
        cdef Py_ssize_t i, n = k.shape[0]
        out = np.empty(n, dtype=np.int64)
        cdef i64[::1] o = out
        cdef uint64_t mask
        for i in range(n):
            if i + _AHEAD < n:
                mask = self._cap - 1
                MF_PREFETCH(self._table + 2 * (_bucket(k[i + _AHEAD]) & mask))
            o[i] = self._find_or_add(k[i], True)
        return out

    def lookup(self, keys):
        cdef const i64[::1] k = np.ascontiguousarray(keys, dtype=np.int64)
        cdef Py_ssize_t i, n = k.shape[0]
        out = np.empty(n, dtype=np.int64)
        cdef i64[::1] o = out
        cdef uint64_t mask = self._cap - 1
        for i in range(n):
            if i + _AHEAD < n:
                MF_PREFETCH(self._table + 2 * (_bucket(k[i + _AHEAD]) & mask))
            o[i] = self._find_or_add(k[i], False)
        return out

    def keys(self):
        out = np.empty(self._n, dtype=np.int64)
        cdef i64[::1] o = out
        cdef Py_ssize_t i
        for i in range(self._n):
            o[i] = self._order[i]
        return out


cdef i64* _alloc_table(Py_ssize_t cap) except NULL:
    cdef i64* t = _grow(NULL, 0, 2 * cap, 0)
    cdef Py_ssize_t i
    for i in range(cap):
        t[2 * i + 1] = -1
    return t


cdef class IdMap:
    """Original mask ID -> current mask ID. Unissued IDs map to -1."""

    cdef i64* _cur
    cdef Py_ssize_t _size
    cdef Py_ssize_t _cap

    def __cinit__(self):
        self._cap = 64
        self._size = 0
        self._cur = _grow(NULL, 0, self._cap, -1)

    def __dealloc__(self):
        free(self._cur)

    def __len__(self):
        return self._size

    cpdef ensure(self, Py_ssize_t size):
        cdef Py_ssize_t cap = self._cap
        if size > cap:
            while cap < size:
                cap *= 2
            self._cur = _grow(self._cur, self._cap, cap, -1)
            self._cap = cap
        if size > self._size:
            self._size = size

    def set(self, i64 orig, i64 cur):
        self.ensure(orig + 1)
        self._cur[orig] = cur

    def resolve(self, i64 orig):
        if orig < 0 or orig >= self._size or self._cur[orig] < 0:
            raise KeyError(orig)
        return self._cur[orig]

    def remap(self, origs, i64 cur):
        cdef const i64[::1] o = np.ascontiguousarray(origs, dtype=np.int64)
        cdef Py_ssize_t i
        for i in range(o.shape[0]):
            if o[i] < 0 or o[i] >= self._size:
                raise KeyError(o[i])
        for i in range(o.shape[0]):
            self._cur[o[i]] = cur

    def as_array(self):
        out = np.empty(self._size, dtype=np.int64)
        cdef i64[::1] a = out
        cdef Py_ssize_t i
        for i in range(self._size):
            a[i] = self._cur[i]
        return out


cdef enum:
    _INLINE = 4
    _REC = 6  # per slot: count, 4 inline IDs, overflow head


cdef class IdChains:
    """Append-only per-slot lists of original mask IDs.

    The first few IDs of a slot live inline in one record; later ones go to a
    linked overflow list, so typical slots cost a single cache line to read.
    """

    cdef i64* _rec
    cdef i64* _otail
    cdef Py_ssize_t _nslots
    cdef Py_ssize_t _slot_cap
    cdef i64* _val
    cdef i64* _next
    cdef Py_ssize_t _nnodes
    cdef Py_ssize_t _node_cap
    # scratch for count_resolved, indexed by current ID
    cdef i64* _stamp
    cdef i64* _count
    cdef Py_ssize_t _scratch_cap
    cdef i64 _epoch

    def __cinit__(self):
        self._slot_cap = 0
        self._nslots = 0
        self._rec = NULL
        self._otail = NULL
        self._ensure_slots(64)
        self._nslots = 0
        self._node_cap = 256
        self._nnodes = 0
        self._val = _grow(NULL, 0, self._node_cap, 0)
        self._next = _grow(NULL, 0, self._node_cap, -1)
        self._scratch_cap = 64
        self._stamp = _grow(NULL, 0, self._scratch_cap, -1)
        self._count = _grow(NULL, 0, self._scratch_cap, 0)
        self._epoch = 0

    def __dealloc__(self):
        free(self._rec)
        free(self._otail)
        free(self._val)
        free(self._next)
        free(self._stamp)
        free(self._count)

    def __len__(self):
        return self._nslots

    cdef void _ensure_slots(self, Py_ssize_t n) except *:
        cdef Py_ssize_t cap = self._slot_cap if self._slot_cap > 0 else 64
        cdef Py_ssize_t i
        if n > self._slot_cap:
            while cap < n:
                cap *= 2
            self._rec = _grow(self._rec, _REC * self._slot_cap, _REC * cap, 0)
            for i in range(self._slot_cap, cap):
                self._rec[_REC * i + _REC - 1] = -1
            self._otail = _grow(self._otail, self._slot_cap, cap, -1)
            self._slot_cap = cap
        if n > self._nslots:
            self._nslots = n

    cdef void _ensure_nodes(self, Py_ssize_t n) except *:
        cdef Py_ssize_t cap = self._node_cap
        if n > cap:
            while cap < n:
                cap *= 2
            self._val = _grow(self._val, self._node_cap, cap, 0)
            self._next = _grow(self._next, self._node_cap, cap, -1)
            self._node_cap = cap

    cdef void _grow_scratch(self, Py_ssize_t n) except *:
        cdef Py_ssize_t cap = self._scratch_cap
        while cap < n:
            cap *= 2
        self._stamp = _grow(self._stamp, self._scratch_cap, cap, -1)
        self._count = _grow(self._count, self._scratch_cap, cap, 0)
        self._scratch_cap = cap

    def append(self, slots, i64 ident):
        cdef const i64[::1] s = np.ascontiguousarray(slots, dtype=np.int64)
        cdef Py_ssize_t i, n = s.shape[0]
        cdef i64 top = -1, slot, node, cnt
        cdef i64* r
        for i in range(n):
            if s[i] > top:
                top = s[i]
        self._ensure_slots(top + 1)
        for i in range(n):
            if i + _AHEAD < n:
                MF_PREFETCH(self._rec + _REC * s[i + _AHEAD])
            slot = s[i]
            r = self._rec + _REC * slot
            cnt = r[0]
            if cnt < _INLINE:
                r[1 + cnt] = ident
            else:
                self._ensure_nodes(self._nnodes + 1)
                node = self._nnodes
                self._nnodes += 1
                self._val[node] = ident
                self._next[node] = -1
                if r[_REC - 1] < 0:
                    r[_REC - 1] = node
                else:
                    self._next[self._otail[slot]] = node
                self._otail[slot] = node
            r[0] = cnt + 1

    def ids(self, i64 slot):
        cdef i64 node, j
        cdef i64* r
        out = []
        if slot < 0 or slot >= self._nslots:
            return out
        r = self._rec + _REC * slot
        for j in range(min(r[0], _INLINE)):
            out.append(r[1 + j])
        node = r[_REC - 1]
        while node >= 0:
            out.append(self._val[node])
            node = self._next[node]
        return out

    cdef inline Py_ssize_t _tally(self, i64 o, i64* table, Py_ssize_t size, i64[::1] t,
                                  Py_ssize_t nt) except -1:
        cdef i64 c = table[o] if 0 <= o < size else -1
        if c < 0:
            raise KeyError(o)
        if c >= self._scratch_cap:
            # current IDs come from the same counter and may exceed the original range
            self._grow_scratch(c + 1)
        if self._stamp[c] != self._epoch:
            self._stamp[c] = self._epoch
            if self._count[c] == 0:
                t[nt] = c
                nt += 1
            self._count[c] += 1
        return nt

    def count_resolved(self, slots, IdMap idmap):
        """Per current ID, the number of queried slots carrying it at least once."""
        cdef const i64[::1] s = np.ascontiguousarray(slots, dtype=np.int64)
        cdef Py_ssize_t i, j, n = s.shape[0], nt = 0
        cdef Py_ssize_t size = idmap._size
        cdef i64* table = idmap._cur
        cdef i64 slot, node, c, cnt
        cdef i64* r
        # at most one new distinct ID per stored entry; grown when a slot could overflow it
        touched = np.empty(64, dtype=np.int64)
        cdef i64[::1] t = touched
        for i in range(n):
            if i + _AHEAD < n and 0 <= s[i + _AHEAD] < self._nslots:
                MF_PREFETCH(self._rec + _REC * s[i + _AHEAD])
            slot = s[i]
            if slot < 0 or slot >= self._nslots:
                continue
            r = self._rec + _REC * slot
            cnt = r[0]
            if cnt == 0:
                continue
            if nt + cnt > t.shape[0]:
                touched = np.concatenate([touched, np.empty(max(nt + cnt, t.shape[0]), dtype=np.int64)])
                t = touched
            self._epoch += 1
            try:
                for j in range(min(cnt, _INLINE)):
                    nt = self._tally(r[1 + j], table, size, t, nt)
                node = r[_REC - 1]
                while node >= 0:
                    nt = self._tally(self._val[node], table, size, t, nt)
                    node = self._next[node]
            except KeyError:
                for j in range(nt):
                    self._count[t[j]] = 0
                raise
        result = {}
        for i in range(nt):
            c = t[i]
            result[c] = self._count[c]
            self._count[c] = 0
        return result


cdef class RewriteLabels:
    """Mutable per-slot current-ID lists, rewritten in place on merge."""

    cdef i64* _head
    cdef i64* _tail
    cdef Py_ssize_t _nslots
    cdef Py_ssize_t _slot_cap
    cdef i64* _val
    cdef i64* _next
    cdef Py_ssize_t _nnodes
    cdef Py_ssize_t _node_cap
    cdef i64* _mark
    cdef Py_ssize_t _mark_cap
    cdef i64 _epoch

    def __cinit__(self):
        self._slot_cap = 64
        self._nslots = 0
        self._head = _grow(NULL, 0, self._slot_cap, -1)
        self._tail = _grow(NULL, 0, self._slot_cap, -1)
        self._node_cap = 256
        self._nnodes = 0
        self._val = _grow(NULL, 0, self._node_cap, 0)
        self._next = _grow(NULL, 0, self._node_cap, -1)
        self._mark_cap = 64
        self._mark = _grow(NULL, 0, self._mark_cap, -1)
        self._epoch = 0

    def __dealloc__(self):
        free(self._head)
        free(self._tail)
        free(self._val)
        free(self._next)
        free(self._mark)

    cdef void _ensure_slots(self, Py_ssize_t n) except *:
        cdef Py_ssize_t cap = self._slot_cap
        if n > cap:
            while cap < n:
                cap *= 2
            self._head = _grow(self._head, self._slot_cap, cap, -1)
            self._tail = _grow(self._tail, self._slot_cap, cap, -1)
            self._slot_cap = cap
        if n > self._nslots:
            self._nslots = n

    cdef void _ensure_nodes(self, Py_ssize_t n) except *:
        cdef Py_ssize_t cap = self._node_cap
        if n > cap:
            while cap < n:
                cap *= 2
            self._val = _grow(self._val, self._node_cap, cap, 0)
            self._next = _grow(self._next, self._node_cap, cap, -1)
            self._node_cap = cap

    cdef void _ensure_mark(self, Py_ssize_t n) except *:
        cdef Py_ssize_t cap = self._mark_cap
        if n > cap:
            while cap < n:
                cap *= 2
            self._mark = _grow(self._mark, self._mark_cap, cap, -1)
            self._mark_cap = cap

    cdef inline void _push(self, i64 slot, i64 ident):
        cdef i64 node = self._nnodes
        self._nnodes += 1
        self._val[node] = ident
        self._next[node] = -1
        if self._tail[slot] < 0:
            self._head[slot] = node
        else:
            self._next[self._tail[slot]] = node
        self._tail[slot] = node

    def append(self, slots, i64 ident):
        cdef const i64[::1] s = np.ascontiguousarray(slots, dtype=np.int64)
        cdef Py_ssize_t i, n = s.shape[0]
        cdef i64 top = -1
        for i in range(n):
            if s[i] > top:
                top = s[i]
        self._ensure_slots(top + 1)
        self._ensure_nodes(self._nnodes + n)
        for i in range(n):
            self._push(s[i], ident)

    def rewrite(self, slots, old_ids, i64 new_id):
        cdef const i64[::1] s = np.ascontiguousarray(slots, dtype=np.int64)
        cdef const i64[::1] old = np.ascontiguousarray(old_ids, dtype=np.int64)
        cdef Py_ssize_t i, n = s.shape[0]
        cdef i64 top = new_id, slot, node, prev, nxt
        cdef bint removed
        for i in range(old.shape[0]):
            if old[i] > top:
                top = old[i]
        self._ensure_mark(top + 1)
        self._epoch += 1
        for i in range(old.shape[0]):
            self._mark[old[i]] = self._epoch
        self._ensure_nodes(self._nnodes + n)
        for i in range(n):
            slot = s[i]
            if slot < 0 or slot >= self._nslots:
                continue
            prev = -1
            removed = False
            node = self._head[slot]
            while node >= 0:
                nxt = self._next[node]
                if self._val[node] < self._mark_cap and self._mark[self._val[node]] == self._epoch:
                    removed = True
                    if prev < 0:
                        self._head[slot] = nxt
                    else:
                        self._next[prev] = nxt
                else:
                    prev = node
                node = nxt
            if removed:
                self._tail[slot] = prev
                self._push(slot, new_id)

    def ids(self, i64 slot):
        cdef i64 node
        out = []
        if slot < 0 or slot >= self._nslots:
            return out
        node = self._head[slot]
        while node >= 0:
            out.append(self._val[node])
            node = self._next[node]
        return out
