import pytest
from hypothesis import given
from hypothesis import strategies as st

from ptsim.errors import ConfigError
from ptsim.policy import Mode, ReplicationPolicy, coherence_targets, prefetch_window, shootdown_targets
from ptsim.vmem import PageTablePage, ProcessSpace, Thread

from conftest import BASE, PAGE, Trace, leaf_of, make_sim

WHOLE = (0, 512)


class TestParse:
    @pytest.mark.parametrize("text,mode,d,tlb", [
        ("none", Mode.NONE, 0, False),
        ("eager", Mode.EAGER, 0, False),
        ("lazy", Mode.LAZY, 0, False),
        ("lazy+opt", Mode.LAZY, 0, True),
        ("lazy@9", Mode.LAZY, 9, False),
        ("LAZY@3+opt", Mode.LAZY, 3, True),
    ])
    def test_parse(self, text, mode, d, tlb):
        p = ReplicationPolicy.parse(text)
        assert (p.mode, p.prefetch_degree, p.tlb_filter) == (mode, d, tlb)
        assert ReplicationPolicy.parse(p.label()) == p

    @pytest.mark.parametrize("text", ["replicate-all", "eager+opt", "none@2", "lazy@x", "lazy@99"])
    def test_parse_rejects(self, text):
        with pytest.raises(ConfigError):
            ReplicationPolicy.parse(text)

    def test_filtering_only_for_lazy(self):
        assert ReplicationPolicy(Mode.LAZY, 0, True).filtering
        assert not ReplicationPolicy(Mode.EAGER, 0, True).filtering


class TestPrefetchWindow:
    @pytest.mark.parametrize("idx,d,vma,expected", [
        (7, 0, WHOLE, (7, 8)),
        (6, 1, WHOLE, (6, 8)),
        (100, 9, WHOLE, (0, 512)),
        (150, 9, (100, 300), (100, 300)),
    ])
    def test_examples(self, idx, d, vma, expected):
        w = prefetch_window(idx, d, WHOLE, vma)
        assert (w.start, w.stop) == expected

    def test_absolute_spans(self):
        t0 = 512 * 77
        w = prefetch_window(13, 4, (t0, t0 + 512), (t0 + 12, t0 + 1000))
        assert (w.start, w.stop) == (12, 16)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            prefetch_window(512, 0, WHOLE, WHOLE)
        with pytest.raises(ValueError):
            prefetch_window(0, 10, WHOLE, WHOLE)
        with pytest.raises(ValueError):
            prefetch_window(5, 0, WHOLE, (10, 20))

    @given(st.integers(0, 9), st.data())
    def test_window_properties(self, d, data):
        lo = data.draw(st.integers(0, 511))
        hi = data.draw(st.integers(lo + 1, 512))
        idx = data.draw(st.integers(lo, hi - 1))
        w = prefetch_window(idx, d, WHOLE, (lo, hi))
        assert idx in w
        assert lo <= w.start and w.stop <= hi
        assert 0 < len(w) <= 1 << d
        assert w.start >> d == (w.stop - 1) >> d == idx >> d
        if d:
            smaller = prefetch_window(idx, d - 1, WHOLE, (lo, hi))
            assert w.start <= smaller.start and smaller.stop <= w.stop


def _sim_with_ring(nodes, policy, sharers):
    """One written page owned by node 0, then read from each node in ``sharers``."""
    sim = make_sim(nodes, 2, policy)
    t = Trace()
    t("spawn", 0, node=0)
    for n in sharers:
        if n:
            t("spawn", n, node=n)
    t.mmap(0, 1, BASE)
    t.access(0, BASE, "w")
    for n in sharers:
        if n:
            t.access(n, BASE, "r")
    for ev in t.events:
        sim.apply(ev)
    return sim


class TestCoherenceTargets:
    def test_eager_all_nodes(self):
        sim = _sim_with_ring(8, "eager", [0])
        page = PageTablePage(sim.store, leaf_of(sim, 0, BASE))
        assert coherence_targets(page, sim.policy, sim.topo) == set(range(8))

    def test_lazy_singleton(self):
        sim = make_sim(4, 2, "lazy")
        t = Trace()
        t("spawn", 0, node=2)
        t.mmap(0, 1, BASE)
        t.access(0, BASE, "w")
        for ev in t.events:
            sim.apply(ev)
        page = PageTablePage(sim.store, leaf_of(sim, 2, BASE))
        assert coherence_targets(page, sim.policy, sim.topo) == {2}

    def test_lazy_two_sharers(self):
        sim = _sim_with_ring(4, "lazy", [0, 3])
        page = PageTablePage(sim.store, leaf_of(sim, 0, BASE))
        assert coherence_targets(page, sim.policy, sim.topo) == {0, 3}

    def test_none_is_own_node(self):
        sim = _sim_with_ring(4, "none", [0])
        page = PageTablePage(sim.store, leaf_of(sim, 0, BASE))
        assert coherence_targets(page, sim.policy) == {page.node}


def _space_with_threads(nodes, per_node):
    space = ProcessSpace(0)
    tid = 0
    for n in range(nodes):
        for k in range(per_node):
            space.threads[tid] = Thread(tid, n, n * 18 + k)
            tid += 1
    return space


class TestShootdownTargets:
    def _ring_page(self, sharers):
        sim = _sim_with_ring(8, "lazy+opt", sharers)
        return PageTablePage(sim.store, leaf_of(sim, 0, BASE))

    def test_baseline_all_thread_cores(self):
        page = self._ring_page([0])
        space = _space_with_threads(8, 2)
        got = shootdown_targets(space, page, ReplicationPolicy(Mode.NONE), initiator_core=0)
        assert got == {t.core for t in space.threads.values()} - {0}

    def test_filter_singleton_ring(self):
        page = self._ring_page([0])
        space = _space_with_threads(8, 3)
        got = shootdown_targets(space, page, ReplicationPolicy.parse("lazy+opt"), initiator_core=0)
        assert got == {1, 2}

    def test_filter_two_sharers(self):
        page = self._ring_page([0, 3])
        space = _space_with_threads(8, 2)
        got = shootdown_targets(space, [page], ReplicationPolicy.parse("lazy+opt"), initiator_core=0)
        assert got == {1, 54, 55}

    def test_unfiltered_lazy_matches_baseline(self):
        page = self._ring_page([0, 3])
        space = _space_with_threads(8, 2)
        assert (shootdown_targets(space, page, ReplicationPolicy.parse("lazy"), 0)
                == shootdown_targets(space, page, ReplicationPolicy(Mode.EAGER), 0))

    @given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 17)), min_size=1, max_size=40, unique=True))
    def test_filtering_is_monotone(self, placement):
        page = self._ring_page([0, 3])
        space = ProcessSpace(0)
        for tid, (node, slot) in enumerate(placement):
            space.threads[tid] = Thread(tid, node, node * 18 + slot)
        initiator = placement[0][0] * 18 + placement[0][1]
        full = shootdown_targets(space, page, ReplicationPolicy.parse("lazy"), initiator)
        filt = shootdown_targets(space, page, ReplicationPolicy.parse("lazy+opt"), initiator)
        assert filt <= full
        assert filt == {c for c in full if c // 18 in (0, 3)}
        assert initiator not in full
