import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynact._backend import available_backends


@pytest.fixture(params=sorted(available_backends()))
def tree(request):
    return available_backends()[request.param].RBTree()


class TestBasics:
    def test_insert_iterate_sorted(self, tree):
        for k, i in [(3.0, 1), (1.0, 2), (2.0, 3)]:
            tree.insert(k, i)
        assert tree.items() == [(1.0, 2), (2.0, 3), (3.0, 1)]
        assert len(tree) == 3

    def test_min_item(self, tree):
        tree.insert(5.0, 9)
        tree.insert(-2.0, 4)
        assert tree.min_item() == (-2.0, 4)

    def test_duplicate_rejected(self, tree):
        tree.insert(1.0, 1)
        with pytest.raises(ValueError):
            tree.insert(1.0, 1)

    def test_equal_keys_order_by_ident(self, tree):
        tree.insert(1.0, 5)
        tree.insert(1.0, 2)
        tree.insert(1.0, 9)
        assert tree.items() == [(1.0, 2), (1.0, 5), (1.0, 9)]
        assert tree.min_item() == (1.0, 2)

    def test_remove_missing(self, tree):
        tree.insert(1.0, 1)
        with pytest.raises(KeyError):
            tree.remove(2.0, 1)

    def test_contains(self, tree):
        tree.insert(1.5, 7)
        assert (1.5, 7) in tree
        assert (1.5, 8) not in tree

    def test_empty_min_raises(self, tree):
        with pytest.raises(KeyError):
            tree.min_item()


class TestInvariants:
    def test_ascending_insert_stays_balanced(self, tree):
        n = 4096
        for i in range(n):
            tree.insert(float(i), i)
        tree.validate()
        assert tree.height() <= 2 * math.log2(n + 1)

    def test_random_churn_matches_sorted_list(self, tree):
        rng = np.random.default_rng(42)
        shadow = set()
        for step in range(5000):
            if shadow and rng.random() < 0.4:
                pair = sorted(shadow)[rng.integers(len(shadow))]
                tree.remove(*pair)
                shadow.discard(pair)
            else:
                pair = (round(float(rng.random() * 100), 3), int(rng.integers(1000)))
                if pair in shadow:
                    continue
                tree.insert(*pair)
                shadow.add(pair)
            if step % 500 == 0:
                assert tree.items() == sorted(shadow)
                tree.validate()
        assert tree.items() == sorted(shadow)
        tree.validate()
        if shadow:
            assert tree.min_item() == min(shadow)

    @given(st.lists(st.tuples(st.floats(-100, 100, width=32), st.integers(0, 50)),
                    max_size=120))
    @settings(max_examples=60, deadline=None)
    def test_property_insert_then_drain(self, pairs):
        for factory_name, backends in [("python", available_backends())]:
            t = backends["python"].RBTree()
            inserted = set()
            for k, i in pairs:
                if (k, i) not in inserted:
                    t.insert(k, i)
                    inserted.add((k, i))
            assert t.items() == sorted(inserted)
            t.validate()
            for k, i in sorted(inserted):
                assert t.min_item() == (k, i)
                t.remove(k, i)
            assert len(t) == 0


class TestDeepcopy:
    def test_copy_is_structural_and_independent(self, tree):
        import copy

        rng = np.random.default_rng(3)
        for i in range(200):
            tree.insert(float(rng.standard_normal()), i)
        dup = copy.deepcopy(tree)
        assert dup.items() == tree.items()
        assert dup.height() == tree.height()
        dup.validate()
        key, ident = tree.min_item()
        dup.remove(key, ident)
        assert len(dup) == len(tree) - 1
        assert tree.min_item() == (key, ident)  # original untouched


class TestBackendAgreement:
    def test_both_backends_identical_traces(self):
        backends = available_backends()
        if len(backends) < 2:
            pytest.skip("compiled backend not built")
        rng = np.random.default_rng(9)
        trees = {name: mod.RBTree() for name, mod in backends.items()}
        live = []
        for _ in range(3000):
            if live and rng.random() < 0.45:
                pair = live.pop(rng.integers(len(live)))
                for t in trees.values():
                    t.remove(*pair)
            else:
                pair = (float(rng.standard_normal()), int(rng.integers(10**6)))
                if pair in live:
                    continue
                live.append(pair)
                for t in trees.values():
                    t.insert(*pair)
        items = [t.items() for t in trees.values()]
        assert items[0] == items[1]
        heights = [t.height() for t in trees.values()]
        for t in trees.values():
            t.validate()
        # same algorithm, same rotations: identical shapes
        assert heights[0] == heights[1]
