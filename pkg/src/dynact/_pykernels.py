"""Fallback kernels: vectorized numpy codecs and a pure-Python red-black tree.

Drop-in twin of the compiled extension (``dynact._ckernels``). Both expose the
same functions with identical bit-level behaviour; the backend selector picks
whichever is available at import time.
"""

import numpy as np

BACKEND_NAME = "python"

_U32 = np.uint32
_F32 = np.float32
_EXP_150 = _U32(0x4B000000)  # float32 bit pattern of 2^23
_TWO_23 = _F32(8388608.0)
_MANTISSA_MASK = _U32(0x007FFFFF)


def pack_groups(values, bitwidth):
    """Pack b-bit values into 32-bit words in the 4-word interleaved layout.

    ``values`` must be uint32 with length a multiple of 4*(32//bitwidth).
    Within each group of 4*(32//b) elements, element r lands in word r % 4
    at slot r // 4, slot 0 occupying the most significant bits.
    """
    v = 32 // bitwidth
    vals = np.ascontiguousarray(values, dtype=_U32).reshape(-1, v, 4)
    words = np.zeros((vals.shape[0], 4), dtype=_U32)
    for j in range(v):
        words |= vals[:, j, :] << _U32(32 - bitwidth * (j + 1))
    return words.reshape(-1)


def unpack_groups(words, bitwidth):
    """Inverse of :func:`pack_groups`: isolate each slot by shifting left by
    j*b bits then right by 32-b bits."""
    v = 32 // bitwidth
    grp = np.ascontiguousarray(words, dtype=_U32).reshape(-1, 4)
    out = np.empty((grp.shape[0], v, 4), dtype=_U32)
    for j in range(v):
        out[:, j, :] = (grp << _U32(bitwidth * j)) >> _U32(32 - bitwidth)
    return out.reshape(-1)


def quantize_values(x, qmin, scale, qmax):
    """Map float32 values to integer levels round((x-qmin)/scale), ties away
    from zero, clipped to [0, qmax].

    The float->uint conversion goes through the exponent-bias route: adding
    2^23 to an integer-valued float32 leaves the integer in the mantissa
    bits, so masking the bit pattern recovers it exactly.
    """
    x = np.ascontiguousarray(x, dtype=_F32)
    if scale == 0.0:
        return np.zeros(x.shape, dtype=_U32)
    t = (x - _F32(qmin)) / _F32(scale)
    r = np.floor(t + _F32(0.5))
    q = (r + _TWO_23).view(_U32) & _MANTISSA_MASK
    return np.minimum(q, _U32(qmax))


def dequantize_values(q, qmin, scale):
    """Reconstruct float32 values q*scale + qmin.

    The uint->float conversion ORs in the 2^23 exponent pattern and subtracts
    2^23, which is exact for every value below 2^23.
    """
    q = np.ascontiguousarray(q, dtype=_U32)
    qf = (q | _EXP_150).view(_F32) - _TWO_23
    return qf * _F32(scale) + _F32(qmin)


_RED = True
_BLACK = False


class _Node:
    __slots__ = ("key", "ident", "left", "right", "parent", "red")

    def __init__(self, key=0.0, ident=0, red=_BLACK):
        self.key = key
        self.ident = ident
        self.left = None
        self.right = None
        self.parent = None
        self.red = red


class RBTree:
    """Red-black tree over (key, ident) pairs, ordered by key then ident.

    Standard sentinel-based implementation: rotations plus insert/delete
    fixup keep the black-height balanced so lookups, inserts and removals
    stay O(log n). Duplicate (key, ident) pairs are rejected.
    """

    def __init__(self):
        self._nil = _Node()
        self._nil.left = self._nil.right = self._nil.parent = self._nil
        self._root = self._nil
        self._count = 0

    def __len__(self):
        return self._count

    def __deepcopy__(self, memo):
        out = type(self)()

        def clone(node, parent):
            if node is self._nil:
                return out._nil
            c = _Node(node.key, node.ident, node.red)
            c.parent = parent
            c.left = clone(node.left, c)
            c.right = clone(node.right, c)
            return c

        out._root = clone(self._root, out._nil)
        out._count = self._count
        memo[id(self)] = out
        return out

    @staticmethod
    def _less(k1, i1, k2, i2):
        if k1 != k2:
            return k1 < k2
        return i1 < i2

    def _rotate_left(self, x):
        y = x.right
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

    def _rotate_right(self, x):
        y = x.left
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
        key = float(key)
        ident = int(ident)
        parent = self._nil
        cur = self._root
        while cur is not self._nil:
            parent = cur
            if self._less(key, ident, cur.key, cur.ident):
                cur = cur.left
            elif self._less(cur.key, cur.ident, key, ident):
                cur = cur.right
            else:
                raise ValueError(f"duplicate tree key ({key!r}, {ident!r})")
        node = _Node(key, ident, _RED)
        node.left = node.right = self._nil
        node.parent = parent
        if parent is self._nil:
            self._root = node
        elif self._less(key, ident, parent.key, parent.ident):
            parent.left = node
        else:
            parent.right = node
        self._count += 1
        self._insert_fixup(node)

    def _insert_fixup(self, z):
        while z.parent.red:
            gp = z.parent.parent
            if z.parent is gp.left:
                y = gp.right
                if y.red:
                    z.parent.red = _BLACK
                    y.red = _BLACK
                    gp.red = _RED
                    z = gp
                else:
                    if z is z.parent.right:
                        z = z.parent
                        self._rotate_left(z)
                    z.parent.red = _BLACK
                    z.parent.parent.red = _RED
                    self._rotate_right(z.parent.parent)
            else:
                y = gp.left
                if y.red:
                    z.parent.red = _BLACK
                    y.red = _BLACK
                    gp.red = _RED
                    z = gp
                else:
                    if z is z.parent.left:
                        z = z.parent
                        self._rotate_right(z)
                    z.parent.red = _BLACK
                    z.parent.parent.red = _RED
                    self._rotate_left(z.parent.parent)
        self._root.red = _BLACK

    def _find(self, key, ident):
        cur = self._root
        while cur is not self._nil:
            if self._less(key, ident, cur.key, cur.ident):
                cur = cur.left
            elif self._less(cur.key, cur.ident, key, ident):
                cur = cur.right
            else:
                return cur
        return None

    def __contains__(self, pair):
        key, ident = pair
        return self._find(float(key), int(ident)) is not None

    def _minimum(self, node):
        while node.left is not self._nil:
            node = node.left
        return node

    def _transplant(self, u, v):
        if u.parent is self._nil:
            self._root = v
        elif u is u.parent.left:
            u.parent.left = v
        else:
            u.parent.right = v
        v.parent = u.parent

    def remove(self, key, ident):
        key = float(key)
        ident = int(ident)
        z = self._find(key, ident)
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

    def _remove_fixup(self, x):
        while x is not self._root and not x.red:
            if x is x.parent.left:
                w = x.parent.right
                if w.red:
                    w.red = _BLACK
                    x.parent.red = _RED
                    self._rotate_left(x.parent)
                    w = x.parent.right
                if not w.left.red and not w.right.red:
                    w.red = _RED
                    x = x.parent
                else:
                    if not w.right.red:
                        w.left.red = _BLACK
                        w.red = _RED
                        self._rotate_right(w)
                        w = x.parent.right
                    w.red = x.parent.red
                    x.parent.red = _BLACK
                    w.right.red = _BLACK
                    self._rotate_left(x.parent)
                    x = self._root
            else:
                w = x.parent.left
                if w.red:
                    w.red = _BLACK
                    x.parent.red = _RED
                    self._rotate_right(x.parent)
                    w = x.parent.left
                if not w.right.red and not w.left.red:
                    w.red = _RED
                    x = x.parent
                else:
                    if not w.left.red:
                        w.right.red = _BLACK
                        w.red = _RED
                        self._rotate_left(w)
                        w = x.parent.left
                    w.red = x.parent.red
                    x.parent.red = _BLACK
                    w.left.red = _BLACK
                    self._rotate_right(x.parent)
                    x = self._root
        x.red = _BLACK

    def min_item(self):
        if self._root is self._nil:
            raise KeyError("tree is empty")
        node = self._minimum(self._root)
        return node.key, node.ident

    def __iter__(self):
        # in-order walk, ascending (key, ident)
        stack = []
        node = self._root
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
        """Longest root-to-leaf path, in nodes."""
        best = 0
        stack = [(self._root, 0)] if self._root is not self._nil else []
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
        """Check the red-black invariants; raises ValueError on violation.

        Returns the tree's black-height.
        """
        if self._root.red:
            raise ValueError("root is red")

        def walk(node):
            if node is self._nil:
                return 1
            if node.red and (node.left.red or node.right.red):
                raise ValueError("red node with red child")
            if node.left is not self._nil and not self._less(
                node.left.key, node.left.ident, node.key, node.ident
            ):
                raise ValueError("left child out of order")
            if node.right is not self._nil and not self._less(
                node.key, node.ident, node.right.key, node.right.ident
            ):
                raise ValueError("right child out of order")
            lh = walk(node.left)
            rh = walk(node.right)
            if lh != rh:
                raise ValueError("unequal black heights")
            return lh + (0 if node.red else 1)

        return walk(self._root)
