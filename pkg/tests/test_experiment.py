from kvpath.config import ExperimentConfig, with_cell
from kvpath.experiment import cell_name, grid, run_experiment, simulate

BASE = {
    # Long appends on a thin storage link: reads dominate.
    "cluster": {"gpus_per_node": 2, "n_layer": 4, "storage_ratio": 0.001},
    "workload": {"source": {"synthetic": {"max_len": 32768, "mean_turns": 6, "mean_append": 3000,
                                          "mean_gen": 20, "count": 8, "seed": 1}}},
}


def cfg(**extra):
    return ExperimentConfig.from_dict({**BASE, **extra})


def test_grid_is_cartesian_in_axis_order():
    c = cfg(sweep={"pd": ["1P1D", "2P1D"], "policy": ["dual_path", "pe_only", "oracle"]})
    cells = grid(c)
    assert len(cells) == 6
    assert list(cells[0]) == ["policy", "pd"]
    assert cell_name(4, cells[4]) == "c004_policy-oracle_pd-1P1D"


def test_oracle_never_slower_than_dual_path():
    c = cfg(sweep={"agents": [4, 8], "policy": ["dual_path", "oracle"]})
    jct = {}
    for cell in grid(c):
        jct[cell["agents"], cell["policy"]] = simulate(with_cell(c, cell)).jct
    for n in (4, 8):
        assert jct[n, "oracle"] <= jct[n, "dual_path"]


def test_more_prefill_nodes_help_storage_bound_pe_only():
    c = cfg(policy="pe_only")
    one = simulate(with_cell(c, {"pd": "1P1D"})).jct
    two = simulate(with_cell(c, {"pd": "2P1D"})).jct
    assert two < one


def test_dual_path_beats_pe_only_when_storage_bound():
    c = cfg()
    assert simulate(with_cell(c, {"policy": "dual_path"})).jct < \
        simulate(with_cell(c, {"policy": "pe_only"})).jct


def test_run_experiment_results_in_grid_order(tmp_path):
    c = cfg(sweep={"policy": ["pe_only", "dual_path"]})
    res = run_experiment(c, tmp_path)
    assert [r["cell"]["policy"] for r in res] == ["pe_only", "dual_path"]
    assert all(r["status"] == "ok" for r in res)
