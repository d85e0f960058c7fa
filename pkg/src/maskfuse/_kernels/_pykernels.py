"""Pure-Python kernels. Same surface as the compiled ``_ckernels`` module."""

import numpy as np

BACKEND = "python"


class KeyIndex:
    """Maps packed int64 voxel keys to dense slots issued in insertion order."""

    def __init__(self, capacity=1024):
        # capacity is a sizing hint for the compiled table; dict sizes itself
        self._slots = {}

    def __len__(self):
        return len(self._slots)

    def get_or_insert(self, keys):
        slots = self._slots
        get = slots.setdefault
        out = [get(k, len(slots)) for k in np.asarray(keys, dtype=np.int64).tolist()]
        return np.array(out, dtype=np.int64)

    def lookup(self, keys):
        get = self._slots.get
        out = [get(k, -1) for k in np.asarray(keys, dtype=np.int64).tolist()]
        return np.array(out, dtype=np.int64)

    def keys(self):
        return np.fromiter(self._slots.keys(), dtype=np.int64, count=len(self._slots))


class IdMap:
    """Original mask ID -> current mask ID. Unissued IDs map to -1."""

    def __init__(self):
        self._cur = []

    def __len__(self):
        return len(self._cur)

    def ensure(self, size):
        if size > len(self._cur):
            self._cur.extend([-1] * (size - len(self._cur)))

    def set(self, orig, cur):
        self.ensure(orig + 1)
        self._cur[orig] = cur

    def resolve(self, orig):
        if orig < 0 or orig >= len(self._cur) or self._cur[orig] < 0:
            raise KeyError(orig)
        return self._cur[orig]

    def remap(self, origs, cur):
        table = self._cur
        origs = [int(o) for o in origs]
        for o in origs:
            if o < 0 or o >= len(table):
                raise KeyError(o)
        for o in origs:
            table[o] = cur

    def as_array(self):
        return np.array(self._cur, dtype=np.int64)


class IdChains:
    """Append-only per-slot lists of original mask IDs."""

    def __init__(self):
        self._lists = []

    def __len__(self):
        return len(self._lists)

    def append(self, slots, ident):
        lists = self._lists
        slots = np.asarray(slots, dtype=np.int64).tolist()
        if slots:
            top = max(slots) + 1
            if top > len(lists):
                lists.extend([] for _ in range(top - len(lists)))
        for s in slots:
            lists[s].append(ident)

    def ids(self, slot):
        if slot < 0 or slot >= len(self._lists):
            return []
        return list(self._lists[slot])

    def count_resolved(self, slots, idmap):
        """Per current ID, the number of queried slots carrying it at least once."""
        lists = self._lists
        n = len(lists)
        table = idmap._cur
        size = len(table)
        counts = {}
        for s in np.asarray(slots, dtype=np.int64).tolist():
            if s < 0 or s >= n:
                continue
            ids = lists[s]
            if not ids:
                continue
            if len(ids) == 1:
                o = ids[0]
                c = table[o] if o < size else -1
                if c < 0:
                    raise KeyError(o)
                counts[c] = counts.get(c, 0) + 1
                continue
            seen = set()
            for o in ids:
                c = table[o] if o < size else -1
                if c < 0:
                    raise KeyError(o)
                seen.add(c)
            for c in seen:
                counts[c] = counts.get(c, 0) + 1
        return counts


class RewriteLabels:
    """Mutable per-slot current-ID lists, rewritten in place on merge."""

    def __init__(self):
        self._lists = []

    def append(self, slots, ident):
        lists = self._lists
        slots = np.asarray(slots, dtype=np.int64).tolist()
        if slots:
            top = max(slots) + 1
            if top > len(lists):
                lists.extend([] for _ in range(top - len(lists)))
        for s in slots:
            lists[s].append(ident)

    def rewrite(self, slots, old_ids, new_id):
        lists = self._lists
        old = set(int(i) for i in old_ids)
        for s in np.asarray(slots, dtype=np.int64).tolist():
            cur = lists[s]
            kept = [i for i in cur if i not in old]
            if len(kept) != len(cur):
                kept.append(new_id)
                lists[s] = kept

    def ids(self, slot):
        if slot < 0 or slot >= len(self._lists):
            return []
        return list(self._lists[slot])
