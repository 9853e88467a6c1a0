import pytest
from hypothesis import given
from hypothesis import strategies as st

from ptsim.errors import ConfigError
from ptsim.topology import CostParams, MachineTopology, access_cost, build_topology, ipi_cost


class TestBuildTopology:
    def test_default_machine(self):
        topo = build_topology(8, 18)
        assert topo.core_count == 144
        assert topo.node_of(19) == 1

    def test_single_core(self):
        topo = build_topology(1, 1)
        assert topo.core_count == 1
        assert access_cost(topo, 0, 0) == topo.costs.local_mem

    def test_last_core_of_small_machine(self):
        assert build_topology(4, 2).node_of(7) == 3

    @pytest.mark.parametrize("nodes,cores", [(0, 4), (4, 0), (-1, 2), (2, -3)])
    def test_rejects_non_positive_sizes(self, nodes, cores):
        with pytest.raises(ConfigError):
            build_topology(nodes, cores)

    def test_rejects_non_integer_sizes(self):
        with pytest.raises(ConfigError):
            MachineTopology(2.0, 2)
        with pytest.raises(ConfigError):
            MachineTopology(True, 2)

    def test_core_out_of_range(self):
        topo = build_topology(2, 2)
        with pytest.raises(ValueError):
            topo.node_of(4)
        with pytest.raises(ValueError):
            topo.node_of(-1)

    def test_cores_of(self):
        assert list(build_topology(3, 4).cores_of(2)) == [8, 9, 10, 11]


class TestCostParams:
    def test_negative_cost_rejected(self):
        with pytest.raises(ConfigError):
            CostParams(local_mem=-1)

    def test_ordering_enforced(self):
        with pytest.raises(ConfigError):
            CostParams(local_mem=5, remote_mem=4)
        with pytest.raises(ConfigError):
            CostParams(remote_mem=20, remote_mem_interference=12)
        with pytest.raises(ConfigError):
            CostParams(ipi_local=200, ipi_remote=120)

    def test_non_numeric_rejected(self):
        with pytest.raises(ConfigError):
            CostParams(local_mem="1")

    def test_from_mapping_overrides(self):
        c = CostParams.from_mapping({"ipi_remote": 300})
        assert c.ipi_remote == 300
        assert c.ipi_local == CostParams().ipi_local

    def test_from_mapping_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            CostParams.from_mapping({"bogus": 1})


class TestAccessCost:
    def test_local_and_remote(self):
        topo = build_topology(8, 18)
        assert access_cost(topo, 0, 0) == topo.costs.local_mem
        assert access_cost(topo, 0, 3) == topo.costs.remote_mem
        assert access_cost(topo, 0, 3, interference=True) == topo.costs.remote_mem_interference

    def test_node_out_of_range(self):
        topo = build_topology(2, 2)
        with pytest.raises(ValueError):
            access_cost(topo, 0, 2)
        with pytest.raises(ValueError):
            ipi_cost(topo, 5, 0)

    def test_ipi_cost(self):
        topo = build_topology(2, 2)
        assert ipi_cost(topo, 1, 1) == topo.costs.ipi_local
        assert ipi_cost(topo, 1, 0) == topo.costs.ipi_remote

    @given(st.integers(1, 16), st.data())
    def test_local_never_dearer_and_symmetric(self, nodes, data):
        topo = build_topology(nodes, 1)
        a = data.draw(st.integers(0, nodes - 1))
        b = data.draw(st.integers(0, nodes - 1))
        for interference in (False, True):
            assert access_cost(topo, a, a, interference) <= access_cost(topo, a, b, interference)
            assert access_cost(topo, a, b, interference) == access_cost(topo, b, a, interference)
        assert ipi_cost(topo, a, a) <= ipi_cost(topo, a, b)
