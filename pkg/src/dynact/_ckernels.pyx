# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: b-bit word packing, (de)quantization, and the
density-keyed red-black tree. Bit-for-bit identical to dynact._pykernels."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "compiled"


def pack_groups(values, int bitwidth):
    cdef cnp.uint32_t[::1] vals = np.ascontiguousarray(values, dtype=np.uint32)
    cdef Py_ssize_t n = vals.shape[0]
    cdef int v = 32 // bitwidth
    cdef Py_ssize_t n_words = n // (4 * v) * 4
    out = np.zeros(n_words, dtype=np.uint32)
    cdef cnp.uint32_t[::1] words = out
    cdef Py_ssize_t e, g
    cdef int r, lane, slot
    for e in range(n):
        g = e // (4 * v)
        r = e % (4 * v)
        lane = r % 4
        slot = r / 4
        words[4 * g + lane] |= vals[e] << (32 - bitwidth * (slot + 1))
    return out


def unpack_groups(words, int bitwidth):
    cdef cnp.uint32_t[::1] src = np.ascontiguousarray(words, dtype=np.uint32)
    cdef Py_ssize_t n_words = src.shape[0]
    cdef int v = 32 // bitwidth
    cdef Py_ssize_t n = n_words // 4 * (4 * v)
    out = np.empty(n, dtype=np.uint32)
    cdef cnp.uint32_t[::1] dst = out
    cdef Py_ssize_t g
    cdef int j, lane
    cdef cnp.uint32_t w
    for g in range(n_words // 4):
        for lane in range(4):
            w = src[4 * g + lane]
            for j in range(v):
                dst[g * 4 * v + j * 4 + lane] = (w << (bitwidth * j)) >> (32 - bitwidth)
    return out


def quantize_values(x, float qmin, float scale, unsigned int qmax):
    cdef cnp.float32_t[::1] src = np.ascontiguousarray(x, dtype=np.float32)
    cdef Py_ssize_t n = src.shape[0]
    out = np.zeros(n, dtype=np.uint32)
    cdef cnp.uint32_t[::1] dst = out
    cdef Py_ssize_t i
    cdef float t
    cdef unsigned int q
    if scale == 0.0:
        return out
    for i in range(n):
        t = (src[i] - qmin) / scale
        q = <unsigned int> (t + 0.5)
        if q > qmax:
            q = qmax
        dst[i] = q
    return out


def dequantize_values(q, float qmin, float scale):
    cdef cnp.uint32_t[::1] src = np.ascontiguousarray(q, dtype=np.uint32)
    cdef Py_ssize_t n = src.shape[0]
    out = np.empty(n, dtype=np.float32)
    cdef cnp.float32_t[::1] dst = out
    cdef Py_ssize_t i
    for i in range(n):
        dst[i] = <float> src[i] * scale + qmin
    return out


cdef class _Node:
    cdef double key
    cdef long long ident
    cdef _Node left, right, parent
    cdef bint red


cdef inline bint _less(double k1, long long i1, double k2, long long i2):
    if k1 != k2:
        return k1 < k2
    return i1 < i2


cdef class RBTree:
    """Red-black tree over (key, ident) pairs, ordered by key then ident."""

    cdef _Node _nil
    cdef _Node _root
    cdef Py_ssize_t _count

    def __cinit__(self):
        self._nil = _Node()
        self._nil.red = False
        self._nil.left = self._nil.right = self._nil.parent = self._nil
        self._root = self._nil
        self._count = 0

    def __len__(self):
        return self._count

    cdef _Node _clone(self, _Node node, RBTree out, _Node parent):
        if node is self._nil:
            return out._nil
        cdef _Node c = _Node()
        c.key = node.key
        c.ident = node.ident
        c.red = node.red
        c.parent = parent
        c.left = self._clone(node.left, out, c)
        c.right = self._clone(node.right, out, c)
        return c

    def __deepcopy__(self, memo):
        cdef RBTree out = RBTree()
        out._root = self._clone(self._root, out, out._nil)
        out._count = self._count
        memo[id(self)] = out
        return out

    cdef void _rotate_left(self, _Node x):
        cdef _Node y = x.right
        x.right = y.left
        if y.left is not self._nil:
            y.left.parent = x
        y.parent = x.parent
        if x.parent is self._nil:
            self._root = y
        elif x is x.parent.left:
            x.parent.left = y
        else:
            x.parent.right = y
        y.left = x
        x.parent = y

    cdef void _rotate_right(self, _Node x):
        cdef _Node y = x.left
        x.left = y.right
        if y.right is not self._nil:
            y.right.parent = x
        y.parent = x.parent
        if x.parent is self._nil:
            self._root = y
        elif x is x.parent.right:
            x.parent.right = y
        else:
            x.parent.left = y
        y.right = x
        x.parent = y

    def insert(self, key, ident):
        cdef double k = key
        cdef long long i = ident
        cdef _Node parent = self._nil
        cdef _Node cur = self._root
        cdef _Node node
        while cur is not self._nil:
            parent = cur
            if _less(k, i, cur.key, cur.ident):
                cur = cur.left
            elif _less(cur.key, cur.ident, k, i):
                cur = cur.right
            else:
                raise ValueError(f"duplicate tree key ({key!r}, {ident!r})")
        node = _Node()
        node.key = k
        node.ident = i
        node.red = True
        node.left = node.right = self._nil
        node.parent = parent
        if parent is self._nil:
            self._root = node
        elif _less(k, i, parent.key, parent.ident):
            parent.left = node
        else:
            parent.right = node
        self._count += 1
        self._insert_fixup(node)

    cdef void _insert_fixup(self, _Node z):
        cdef _Node y, gp
        while z.parent.red:
            gp = z.parent.parent
            if z.parent is gp.left:
                y = gp.right
                if y.red:
                    z.parent.red = False
                    y.red = False
                    gp.red = True
                    z = gp
                else:
                    if z is z.parent.right:
                        z = z.parent
                        self._rotate_left(z)
                    z.parent.red = False
                    z.parent.parent.red = True
                    self._rotate_right(z.parent.parent)
            else:
                y = gp.left
                if y.red:
                    z.parent.red = False
                    y.red = False
                    gp.red = True
                    z = gp
                else:
                    if z is z.parent.left:
                        z = z.parent
                        self._rotate_right(z)
                    z.parent.red = False
                    z.parent.parent.red = True
                    self._rotate_left(z.parent.parent)
        self._root.red = False

    cdef _Node _find(self, double k, long long i):
        cdef _Node cur = self._root
        while cur is not self._nil:
            if _less(k, i, cur.key, cur.ident):
                cur = cur.left
            elif _less(cur.key, cur.ident, k, i):
                cur = cur.right
            else:
                return cur
        return None

    def __contains__(self, pair):
        return self._find(pair[0], pair[1]) is not None

    cdef _Node _minimum(self, _Node node):
        while node.left is not self._nil:
            node = node.left
        return node

    cdef void _transplant(self, _Node u, _Node v):
        if u.parent is self._nil:
            self._root = v
        elif u is u.parent.left:
            u.parent.left = v
        else:
            u.parent.right = v
        v.parent = u.parent

    def remove(self, key, ident):
        cdef double k = key
        cdef long long i = ident
        cdef _Node z = self._find(k, i)
        cdef _Node x, y
        cdef bint y_was_red
        if z is None:
            raise KeyError((key, ident))
        y = z
        y_was_red = y.red
        if z.left is self._nil:
            x = z.right
            self._transplant(z, z.right)
        elif z.right is self._nil:
            x = z.left
            self._transplant(z, z.left)
        else:
            y = self._minimum(z.right)
            y_was_red = y.red
            x = y.right
            if y.parent is z:
                x.parent = y
            else:
                self._transplant(y, y.right)
                y.right = z.right
                y.right.parent = y
            self._transplant(z, y)
            y.left = z.left
            y.left.parent = y
            y.red = z.red
        self._count -= 1
        if not y_was_red:
            self._remove_fixup(x)

    cdef void _remove_fixup(self, _Node x):
        cdef _Node w
        while x is not self._root and not x.red:
            if x is x.parent.left:
                w = x.parent.right
                if w.red:
                    w.red = False
                    x.parent.red = True
                    self._rotate_left(x.parent)
                    w = x.parent.right
                if not w.left.red and not w.right.red:
                    w.red = True
                    x = x.parent
                else:
                    if not w.right.red:
                        w.left.red = False
                        w.red = True
                        self._rotate_right(w)
                        w = x.parent.right
                    w.red = x.parent.red
                    x.parent.red = False
                    w.right.red = False
                    self._rotate_left(x.parent)
                    x = self._root
            else:
                w = x.parent.left
                if w.red:
                    w.red = False
                    x.parent.red = True
                    self._rotate_right(x.parent)
                    w = x.parent.left
                if not w.right.red and not w.left.red:
                    w.red = True
                    x = x.parent
                else:
                    if not w.left.red:
                        w.right.red = False
                        w.red = True
                        self._rotate_left(w)
                        w = x.parent.left
                    w.red = x.parent.red
                    x.parent.red = False
                    w.left.red = False
                    self._rotate_right(x.parent)
                    x = self._root
        x.red = False

    def min_item(self):
        if self._root is self._nil:
            raise KeyError("tree is empty")
        cdef _Node node = self._minimum(self._root)
        return node.key, node.ident

    def __iter__(self):
        cdef list stack = []
        cdef _Node node = self._root
        while stack or node is not self._nil:
            while node is not self._nil:
                stack.append(node)
                node = node.left
            node = stack.pop()
            yield node.key, node.ident
            node = node.right

    def items(self):
        return list(self)

    def height(self):
        cdef Py_ssize_t best = 0, depth
        cdef list stack
        cdef _Node node
        if self._root is self._nil:
            return 0
        stack = [(self._root, 0)]
        while stack:
            node, depth = stack.pop()
            depth += 1
            if depth > best:
                best = depth
            if node.left is not self._nil:
                stack.append((node.left, depth))
            if node.right is not self._nil:
                stack.append((node.right, depth))
        return best

    def validate(self):
        if self._root.red:
            raise ValueError("root is red")
        return self._walk(self._root)

    cdef int _walk(self, _Node node) except -1:
        cdef int lh, rh
        if node is self._nil:
            return 1
        if node.red and (node.left.red or node.right.red):
            raise ValueError("red node with red child")
        if node.left is not self._nil and not _less(
            node.left.key, node.left.ident, node.key, node.ident
        ):
            raise ValueError("left child out of order")
        if node.right is not self._nil and not _less(
            node.key, node.ident, node.right.key, node.right.ident
        ):
            raise ValueError("right child out of order")
        lh = self._walk(node.left)
        rh = self._walk(node.right)
        if lh != rh:
            raise ValueError("unequal black heights")
        return lh + (0 if node.red else 1)
