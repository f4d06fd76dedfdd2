"""B+Tree whose nodes are buffer-pool pages.

Node content starts after the page header (and the fragment checksum table,
if any)::

    +0   u16 slot count
    +2   u16 zero
    +4   u32 cell start (lowest cell offset; page size when empty)
    +8   u64 leftmost child (inner nodes)
    +16  u16 slot directory, one cell offset per entry, keys ascending

Leaf cells are ``u16 klen, u16 vlen, key, value``; inner cells are
``u16 klen, u64 child, key``. Page 0 is the meta page holding the root id,
the tree height and the next unallocated page id.

Mutations compute the new node image and log the differing byte ranges as
UPDATE records, so every change flows through ``BufferPool.update_fixed``.
Deletes are lazy: nodes are never merged.
"""

from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass

from . import core
from .bufferpool import READ, WRITE, BufferPool
from .core import PAGE_INNER, PAGE_LEAF, PAGE_META
from .errors import CapacityError, OptipoolError, SizeError

META_PAGE = 0
_NODE = struct.Struct("<HHIQ")
_META = struct.Struct("<QIIQ")
_LEAF_CELL = struct.Struct("<HH")
_INNER_CELL = struct.Struct("<HQ")
NODE_HEADER = _NODE.size
DIFF_GAP = 8
_CHUNK = 64


def diff_ranges(old, new, gap: int = DIFF_GAP) -> list[tuple[int, int]]:
    """Half-open byte ranges where ``old`` and ``new`` differ, merging close ones."""
    n = len(old)
    out: list[list[int]] = []
    mo, mn = memoryview(old), memoryview(new)
    for lo in range(0, n, _CHUNK):
        hi = min(n, lo + _CHUNK)
        if mo[lo:hi] == mn[lo:hi]:
            continue
        i = lo
        while old[i] == new[i]:
            i += 1
        j = hi
        while old[j - 1] == new[j - 1]:
            j -= 1
        if out and i - out[-1][1] <= gap:
            out[-1][1] = j
        else:
            out.append([i, j])
    return [(a, b) for a, b in out]


@dataclass
class Node:
    ptype: int
    keys: list[bytes]
    vals: list  # bytes for leaves, child page ids for inner nodes
    child0: int = 0

    @property
    def leaf(self) -> bool:
        return self.ptype == PAGE_LEAF

    def child_for(self, key: bytes) -> int:
        i = bisect.bisect_right(self.keys, key)
        return self.child0 if i == 0 else self.vals[i - 1]


def cell_bytes(leaf: bool, key: bytes, val) -> bytes:
    if leaf:
        return _LEAF_CELL.pack(len(key), len(val)) + key + val
    return _INNER_CELL.pack(len(key), val) + key


class NodeCodec:
    def __init__(self, page_size: int, fragments: int):
        self.page_size = page_size
        self.base = core.content_start(fragments)
        self.dir = self.base + NODE_HEADER

    def header(self, page):
        return _NODE.unpack_from(page, self.base)

    def parse(self, page) -> Node:
        n, _, _, child0 = _NODE.unpack_from(page, self.base)
        leaf = core.page_type(page) == PAGE_LEAF
        offs = struct.unpack_from(f"<{n}H", page, self.dir)
        keys, vals = [], []
        for off in offs:
            if leaf:
                kl, vl = _LEAF_CELL.unpack_from(page, off)
                k0 = off + _LEAF_CELL.size
                keys.append(bytes(page[k0:k0 + kl]))
                vals.append(bytes(page[k0 + kl:k0 + kl + vl]))
            else:
                kl, child = _INNER_CELL.unpack_from(page, off)
                k0 = off + _INNER_CELL.size
                keys.append(bytes(page[k0:k0 + kl]))
                vals.append(child)
        return Node(core.page_type(page), keys, vals, child0)

    def free_space(self, page) -> int:
        n, _, cell_start, _ = _NODE.unpack_from(page, self.base)
        return cell_start - (self.dir + 2 * n)

    def capacity(self) -> int:
        return self.page_size - self.dir

    def size_of(self, node: Node) -> int:
        return sum(2 + len(cell_bytes(node.leaf, k, v)) for k, v in zip(node.keys, node.vals))

    def build(self, page, node: Node) -> bytearray:
        """``page`` with its node content replaced by a compact encoding of ``node``."""
        out = bytearray(page)
        out[self.base:] = bytes(self.page_size - self.base)
        pos = self.page_size
        offs = []
        for k, v in zip(node.keys, node.vals):
            cell = cell_bytes(node.leaf, k, v)
            pos -= len(cell)
            out[pos:pos + len(cell)] = cell
            offs.append(pos)
        if pos < self.dir + 2 * len(offs):
            raise CapacityError("node content exceeds page")
        struct.pack_into(f"<{len(offs)}H", out, self.dir, *offs)
        _NODE.pack_into(out, self.base, len(offs), 0, pos, node.child0)
        return out

    def insert_at(self, page, pos: int, cell: bytes, replace: bool):
        """Incremental insert of ``cell`` at slot ``pos``; None if it does not fit."""
        n, _, cell_start, child0 = _NODE.unpack_from(page, self.base)
        need = len(cell) + (0 if replace else 2)
        if cell_start - (self.dir + 2 * n) < need:
            return None
        out = bytearray(page)
        off = cell_start - len(cell)
        out[off:cell_start] = cell
        d = self.dir
        if replace:
            struct.pack_into("<H", out, d + 2 * pos, off)
        else:
            out[d + 2 * pos:d + 2 * (n + 1)] = struct.pack("<H", off) + bytes(page[d + 2 * pos:d + 2 * n])
            n += 1
        _NODE.pack_into(out, self.base, n, 0, off, child0)
        return out

    def remove_at(self, page, pos: int) -> bytearray:
        n, _, cell_start, child0 = _NODE.unpack_from(page, self.base)
        out = bytearray(page)
        d = self.dir
        out[d + 2 * pos:d + 2 * n] = bytes(page[d + 2 * (pos + 1):d + 2 * n]) + b"\0\0"
        _NODE.pack_into(out, self.base, n - 1, 0, cell_start if n > 1 else self.page_size, child0)
        return out


class BTree:
    def __init__(self, pool: BufferPool, max_key: int = 128, max_value: int = 256):
        self.pool = pool
        self.max_key, self.max_value = max_key, max_value
        self.codec = NodeCodec(pool.page_size, pool.policy.fragments)
        worst = 2 + len(cell_bytes(True, bytes(max_key), bytes(max_value)))
        if 4 * worst > self.codec.capacity():
            raise SizeError(f"{pool.page_size}-byte pages cannot hold four maximal entries")

    # -- store bootstrap -------------------------------------------------
    @staticmethod
    def format_store(ssd, policy: core.ChecksumPolicy) -> None:
        """Write an empty tree (meta page + root leaf) straight to the SSD image."""
        codec = NodeCodec(ssd.page_size, policy.fragments)
        meta = core.format_page(ssd.page_size, META_PAGE, PAGE_META, policy)
        _META.pack_into(meta, codec.base, 1, 1, 0, 2)
        core.seal_page(meta)
        root = core.format_page(ssd.page_size, 1, PAGE_LEAF, policy)
        root = codec.build(root, Node(PAGE_LEAF, [], []))
        core.seal_page(root)
        ssd.write(META_PAGE, meta)
        ssd.write(1, root)

    @staticmethod
    def bulk_load(ssd, policy: core.ChecksumPolicy, items, fill: float = 0.7) -> int:
        """Build a tree holding ``items`` (sorted, unique keys) directly on SSD.

        Pages are sealed at the null LSN, exactly like a freshly formatted
        store. Returns the number of pages used.
        """
        codec = NodeCodec(ssd.page_size, policy.fragments)
        budget = int(codec.capacity() * fill)
        next_pid = 1

        def emit(ptype, node):
            nonlocal next_pid
            pid = next_pid
            next_pid += 1
            if pid >= ssd.page_count:
                raise CapacityError("bulk load does not fit the store")
            page = codec.build(core.format_page(ssd.page_size, pid, ptype, policy), node)
            ssd.write(pid, core.seal_page(page))
            return pid

        level, node, used = [], Node(PAGE_LEAF, [], []), 0
        for k, v in items:
            size = 2 + len(cell_bytes(True, k, v))
            if node.keys and used + size > budget:
                level.append((node.keys[0], emit(PAGE_LEAF, node)))
                node, used = Node(PAGE_LEAF, [], []), 0
            node.keys.append(k)
            node.vals.append(v)
            used += size
        level.append((node.keys[0] if node.keys else b"", emit(PAGE_LEAF, node)))
        height = 1
        while len(level) > 1:
            parents, node, used, first = [], None, 0, b""
            for sep, pid in level:
                size = 2 + len(cell_bytes(False, sep, pid))
                if node is None or used + size > budget:
                    if node is not None:
                        parents.append((first, emit(PAGE_INNER, node)))
                    node, used, first = Node(PAGE_INNER, [], [], pid), 0, sep
                    continue
                node.keys.append(sep)
                node.vals.append(pid)
                used += size
            parents.append((first, emit(PAGE_INNER, node)))
            level = parents
            height += 1
        meta = core.format_page(ssd.page_size, META_PAGE, PAGE_META, policy)
        _META.pack_into(meta, codec.base, level[0][1], height, 0, next_pid)
        ssd.write(META_PAGE, core.seal_page(meta))
        return next_pid

    # -- page helpers ----------------------------------------------------
    def _log_diff(self, handle, old, new, txn: int) -> int:
        n = 0
        for lo, hi in diff_ranges(old, new):
            self.pool.update_fixed(handle, lo, old[lo:hi], new[lo:hi], txn)
            n += 1
        return n

    def _meta(self):
        with self.pool.fixed(META_PAGE, READ) as h:
            return _META.unpack_from(self.pool.read(h), self.codec.base)

    def _set_meta(self, txn: int, root=None, height=None, next_free=None):
        with self.pool.fixed(META_PAGE, WRITE) as h:
            old = bytes(self.pool.read(h))
            r, ht, z, nf = _META.unpack_from(old, self.codec.base)
            new = bytearray(old)
            _META.pack_into(new, self.codec.base,
                            r if root is None else root, ht if height is None else height,
                            z, nf if next_free is None else next_free)
            self._log_diff(h, old, new, txn)

    def _allocate(self, txn: int, ptype: int) -> int:
        _, _, _, nf = self._meta()
        if nf >= self.pool.ssd.page_count:
            raise CapacityError("store has no unallocated pages left")
        self._set_meta(txn, next_free=nf + 1)
        with self.pool.fixed(nf, WRITE) as h:
            self.pool.format_fixed(h, ptype, txn)
            old = bytes(self.pool.read(h))
            new = self.codec.build(old, Node(ptype, [], []))
            self._log_diff(h, old, new, txn)
        return nf

    def _write_node(self, pid: int, node: Node, txn: int):
        with self.pool.fixed(pid, WRITE) as h:
            old = bytes(self.pool.read(h))
            self._log_diff(h, old, self.codec.build(old, node), txn)

    def _descend(self, key: bytes):
        root, height, _, _ = self._meta()
        path, pid = [], root
        for _ in range(height - 1):
            with self.pool.fixed(pid, READ) as h:
                node = self.codec.parse(self.pool.read(h))
            path.append(pid)
            pid = node.child_for(key)
        return path, pid, root, height

    # -- operations ------------------------------------------------------
    def lookup(self, key: bytes):
        key = bytes(key)
        _, leaf, _, _ = self._descend(key)
        with self.pool.fixed(leaf, READ) as h:
            node = self.codec.parse(self.pool.read(h))
        i = bisect.bisect_left(node.keys, key)
        if i < len(node.keys) and node.keys[i] == key:
            return node.vals[i]
        return None

    def insert(self, txn: int, key: bytes, value: bytes) -> None:
        key, value = bytes(key), bytes(value)
        if not key or len(key) > self.max_key:
            raise SizeError(f"key length {len(key)} outside [1, {self.max_key}]")
        if len(value) > self.max_value:
            raise SizeError(f"value length {len(value)} exceeds {self.max_value}")
        path, leaf, root, height = self._descend(key)
        with self.pool.fixed(leaf, WRITE) as h:
            old = bytes(self.pool.read(h))
            node = self.codec.parse(old)
            i = bisect.bisect_left(node.keys, key)
            replace = i < len(node.keys) and node.keys[i] == key
            if replace and node.vals[i] == value:
                return
            new = self.codec.insert_at(old, i, cell_bytes(True, key, value), replace)
            if new is None:
                if replace:
                    node.vals[i] = value
                else:
                    node.keys.insert(i, key)
                    node.vals.insert(i, value)
                if self.codec.size_of(node) <= self.codec.capacity():
                    new = self.codec.build(old, node)
            if new is not None:
                self._log_diff(h, old, new, txn)
                return
        self._split(txn, leaf, node, path, root, height)

    def _split(self, txn: int, pid: int, node: Node, path: list[int], root: int, height: int):
        """Split an overfull node (already holding the new entry) and propagate."""
        while True:
            total = self.codec.size_of(node)
            acc, mid = 0, 0
            for mid, (k, v) in enumerate(zip(node.keys, node.vals)):
                acc += 2 + len(cell_bytes(node.leaf, k, v))
                if acc * 2 >= total:
                    break
            mid = max(1, min(mid + (1 if node.leaf else 0), len(node.keys) - 1))
            if node.leaf:
                left = Node(node.ptype, node.keys[:mid], node.vals[:mid])
                right = Node(node.ptype, node.keys[mid:], node.vals[mid:])
                sep = right.keys[0]
            else:
                left = Node(node.ptype, node.keys[:mid], node.vals[:mid], node.child0)
                right = Node(node.ptype, node.keys[mid + 1:], node.vals[mid + 1:], node.vals[mid])
                sep = node.keys[mid]
            right_pid = self._allocate(txn, node.ptype)
            self._write_node(right_pid, right, txn)
            self._write_node(pid, left, txn)
            if not path:
                new_root = self._allocate(txn, PAGE_INNER)
                self._write_node(new_root, Node(PAGE_INNER, [sep], [right_pid], pid), txn)
                self._set_meta(txn, root=new_root, height=height + 1)
                return
            parent = path.pop()
            with self.pool.fixed(parent, WRITE) as h:
                old = bytes(self.pool.read(h))
                pnode = self.codec.parse(old)
                i = bisect.bisect_right(pnode.keys, sep)
                new = self.codec.insert_at(old, i, cell_bytes(False, sep, right_pid), False)
                pnode.keys.insert(i, sep)
                pnode.vals.insert(i, right_pid)
                if new is None and self.codec.size_of(pnode) <= self.codec.capacity():
                    new = self.codec.build(old, pnode)
                if new is not None:
                    self._log_diff(h, old, new, txn)
                    return
            pid, node = parent, pnode

    def delete(self, txn: int, key: bytes) -> bool:
        key = bytes(key)
        _, leaf, _, _ = self._descend(key)
        with self.pool.fixed(leaf, WRITE) as h:
            old = bytes(self.pool.read(h))
            node = self.codec.parse(old)
            i = bisect.bisect_left(node.keys, key)
            if i == len(node.keys) or node.keys[i] != key:
                return False
            self._log_diff(h, old, self.codec.remove_at(old, i), txn)
        return True

    # -- whole-tree walks ------------------------------------------------
    def items(self):
        """All (key, value) pairs in key order."""
        root, height, _, _ = self._meta()
        out = []
        self._walk(root, height, None, None, out, check=False)
        return out

    def check(self) -> list[tuple[bytes, bytes]]:
        """Verify structural invariants; raise :class:`TreeCorruption` on failure."""
        root, height, _, _ = self._meta()
        out = []
        self._walk(root, height, None, None, out, check=True)
        return out

    def _walk(self, pid, depth, lo, hi, out, check):
        with self.pool.fixed(pid, READ) as h:
            page = self.pool.read(h)
            node = self.codec.parse(page)
            ptype = core.page_type(page)
        if check:
            want = PAGE_LEAF if depth == 1 else PAGE_INNER
            if ptype != want:
                raise TreeCorruption(f"page {pid}: type {ptype}, expected {want} at depth {depth}")
            if any(a >= b for a, b in zip(node.keys, node.keys[1:])):
                raise TreeCorruption(f"page {pid}: keys not strictly ascending")
            if node.keys and ((lo is not None and node.keys[0] < lo)
                              or (hi is not None and node.keys[-1] >= hi)):
                raise TreeCorruption(f"page {pid}: keys escape separator bounds")
        if depth == 1:
            out.extend(zip(node.keys, node.vals))
            return
        bounds = [lo, *node.keys, hi]
        for i, child in enumerate([node.child0, *node.vals]):
            self._walk(child, depth - 1, bounds[i], bounds[i + 1], out, check)


class TreeCorruption(OptipoolError):
    pass


def bt_insert(tree: BTree, txn: int, key: bytes, value: bytes) -> None:
    tree.insert(txn, key, value)


def bt_lookup(tree: BTree, key: bytes):
    return tree.lookup(key)


def bt_delete(tree: BTree, txn: int, key: bytes) -> bool:
    return tree.delete(txn, key)
