import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from embsp.blockio import Category, IoCounters, open_driver
from embsp.config import Layout, SimConfig
from embsp.vmem import (AllocError, AllocTable, OutOfMemory, Vmem, merge_ranges,
                        subtract_ranges, total, widen)

from conftest import DRIVERS

B = 4096


def make_vmem(tmp_path, **kw):
    kw.setdefault("v", 2)
    kw.setdefault("k", 1)
    kw.setdefault("B", B)
    kw.setdefault("mu", 4 * B)
    cfg = SimConfig(**kw)
    c = IoCounters()
    drv = open_driver(cfg, c, [str(tmp_path)] * cfg.D)
    return Vmem(cfg, drv, c), c


# ---------------------------------------------------------------- allocator

def test_first_fit_examples():
    a = AllocTable(1000)
    assert a.alloc(100) == 0
    assert a.alloc(50) == 100
    a.free(0)
    assert a.alloc(80) == 0
    with pytest.raises(OutOfMemory, match="largest free chunk"):
        a.alloc(1001)
    a.check()


def test_free_coalesces():
    a = AllocTable(300)
    x, y, z = a.alloc(100), a.alloc(100), a.alloc(50)
    a.free(y)
    a.free(x)
    free = [(r.offset, r.size) for r in a.records if r.free]
    assert free[0] == (0, 200)
    a.free(z)
    assert [(r.offset, r.size, r.free) for r in a.records] == [(0, 300, True)]


def test_free_errors():
    a = AllocTable(100)
    with pytest.raises(AllocError):
        a.free(5)
    p = a.alloc(10)
    a.free(p)
    with pytest.raises(AllocError):
        a.free(p)
    with pytest.raises(AllocError):
        a.alloc(0)


def test_try_grow_and_shrink():
    a = AllocTable(100)
    p = a.alloc(10)
    assert a.try_grow(p, 40)
    q = a.alloc(10)
    assert q == 40
    assert not a.try_grow(p, 41)
    assert a.try_grow(p, 20)
    assert a.size_of(p) == 20
    a.check()
    assert a.in_use == 30


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(1, 300), st.integers(0, 50)), max_size=60))
def test_allocator_tiling(ops):
    a = AllocTable(1024)
    live = {}
    for is_alloc, size, pick in ops:
        if is_alloc or not live:
            try:
                off = a.alloc(size)
            except OutOfMemory:
                assert a.largest_free() < size
                continue
            # first fit: no free record before off could hold size
            assert all(not (r.free and r.size >= size) for r in a.records if r.offset < off)
            live[off] = size
        else:
            off = sorted(live)[pick % len(live)]
            a.free(off)
            del live[off]
        a.check()
        assert sorted(a.allocated()) == sorted(live.items())
        assert a.in_use == sum(live.values()) <= a.mu


# ------------------------------------------------------------- range helpers

def _bits(ranges, n=256):
    s = set()
    for o, L in ranges:
        s.update(range(o, o + L))
    return s


range_lists = st.lists(st.tuples(st.integers(0, 200), st.integers(0, 50)), max_size=8)


@settings(max_examples=300, deadline=None)
@given(range_lists, range_lists)
def test_range_helpers_match_set_oracle(a, b):
    assert _bits(merge_ranges(a)) == _bits(a)
    sub = subtract_ranges(a, b)
    assert _bits(sub) == _bits(a) - _bits(b)
    assert total(sub) == len(_bits(sub))
    w = widen(a, 16)
    for o, L in w:
        assert o % 16 == 0 and L % 16 == 0
    assert _bits(a) <= _bits(w)


# ------------------------------------------------------------------- swaps

def test_strict_swap_is_mu(tmp_path):
    vm, c = make_vmem(tmp_path, strict_accounting=True)
    vm.swap_in(0, None)
    vm.contexts[0].alloc.alloc(10)
    assert vm.swap_out(0, None) == 4 * B
    assert vm.swap_in(0, None) == 4 * B
    assert c.swap_out_bytes == 4 * B == c.swap_in_bytes


def test_fine_swap_skips_region(tmp_path):
    vm, c = make_vmem(tmp_path)
    vm.swap_in(0, None)
    al = vm.contexts[0].alloc
    assert al.alloc(B) == 0
    assert al.alloc(B) == B
    assert al.alloc(B) == 2 * B
    al.free(B)
    assert vm.swap_out(0, None, skip=[(2 * B, B)]) == B


def test_fine_swap_nothing_allocated(tmp_path):
    vm, c = make_vmem(tmp_path)
    vm.swap_in(0, None)
    assert vm.swap_out(0, None) == 0
    assert vm.swap_in(0, None) == 0
    assert c.total() == 0


def test_freed_region_excluded(tmp_path):
    vm, c = make_vmem(tmp_path)
    vm.swap_in(0, None)
    al = vm.contexts[0].alloc
    a = al.alloc(100)
    al.alloc(50)
    al.free(a)
    assert vm.swap_out(0, None) == 50


@pytest.mark.parametrize("driver", DRIVERS)
@pytest.mark.parametrize("layout", [Layout.WHOLE, Layout.STRIPED])
def test_swap_round_trip(tmp_path, driver, layout):
    if driver == "memory-mapped" and layout is Layout.STRIPED:
        pytest.skip("mapped files use whole contexts")
    vm, c = make_vmem(tmp_path, driver=driver, v=4, k=2, D=2, layout=layout, mu=8 * 512, B=512)
    rng = np.random.default_rng(3)
    want = {}
    for t in range(4):
        vm.swap_in(t, None)
        al = vm.contexts[t].alloc
        for size in (700, 1500, 33):
            off = al.alloc(size)
            data = rng.bytes(size)
            vm.memory(t)[off:off + size] = data
            want[(t, off)] = data
        vm.swap_out(t, None)
    for t in (3, 1, 0, 2):
        vm.swap_in(t, None)
        for (u, off), data in want.items():
            if u == t:
                assert bytes(vm.memory(t)[off:off + len(data)]) == data
        vm.swap_out(t, None)
    if driver == "memory-mapped":
        assert c.swap_in_bytes == c.swap_out_bytes == 0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 3000), min_size=1, max_size=5))
def test_fine_at_most_strict(tmp_path_factory, sizes):
    tmp = tmp_path_factory.mktemp("fs")
    vm, c = make_vmem(tmp, mu=8 * 512, B=512)
    vm.swap_in(0, None)
    for s in sizes:
        try:
            vm.contexts[0].alloc.alloc(s)
        except OutOfMemory:
            pass
    fine = vm.swap_out(0, None)
    assert fine <= vm.mu
    assert fine == vm.contexts[0].alloc.in_use


def test_write_into_swapped_out_context(tmp_path):
    vm, c = make_vmem(tmp_path)
    vm.swap_in(0, None)
    vm.contexts[0].alloc.alloc(4 * B)
    vm.swap_out(0, None)
    data = bytes(range(256)) * (2 * B // 256)
    vm.write_into_context(None, 0, B, data, Category.DELIVERY_WRITE)
    assert c.delivery_write_bytes == 2 * B
    # unaligned write keeps neighbouring bytes
    vm.write_into_context(None, 0, B + 10, b"xyz", Category.DELIVERY_WRITE)
    vm.swap_in(0, None)
    got = bytes(vm.memory(0)[B:3 * B])
    assert got[:10] == data[:10] and got[10:13] == b"xyz" and got[13:] == data[13:]


def test_write_into_resident_is_memcpy(tmp_path):
    vm, c = make_vmem(tmp_path)
    vm.swap_in(0, None)
    vm.write_into_context(None, 0, 5, b"hello", Category.DELIVERY_WRITE)
    assert bytes(vm.memory(0)[5:10]) == b"hello"
    assert c.delivery_write_bytes == 5 and c.write_ops == 0


def test_write_into_context_range_error(tmp_path):
    vm, _ = make_vmem(tmp_path)
    with pytest.raises(IndexError):
        vm.write_into_context(None, 0, 4 * B - 2, b"abc", Category.DELIVERY_WRITE)


def test_striped_pieces_cover_range(tmp_path):
    vm, _ = make_vmem(tmp_path, v=4, k=1, D=3, layout=Layout.STRIPED, mu=4 * 512, B=512)
    seen = set()
    for t in range(4):
        for reg, coff in vm.pieces(t, 0, vm.mu):
            for i in range(0, reg.len, 512):
                key = (reg.disk, reg.offset + i)
                assert key not in seen
                seen.add(key)
    assert len(seen) == 16
