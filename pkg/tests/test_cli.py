"""CLI tests: config loading, run ids, helpers and small end-to-end runs of every command."""

import argparse
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

import main
from dynamic_ot import NetworkGrid
from errors import ConfigError, DomainError
from ids import atom_labels, make_atom_label, make_run_id
from main import (
    build_parser,
    build_state,
    cmd_converge,
    cmd_dynamic,
    cmd_figure1,
    cmd_jko,
    cmd_monotonicity,
    cluster_measure,
    cmd_stability,
    figure_cost_matrix,
    fit_order,
    load_experiment,
    shared_corridors,
)
from models import BumpSpec, ExperimentConfig, StateSpec
from tube import Trajectory, pixel_cost, rasterize, tube_cost


def write_config(tmp_path: Path, data: dict, name: str = "exp.yaml") -> Path:
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
    return path


def run(cmd, config_path: Path, out: Path, seed: int | None = None) -> int:
    return cmd(argparse.Namespace(config=config_path, out=out, seed=seed))


# ids


def test_run_id_is_filesystem_friendly():
    """Assert run ids replace spaces and drop unsafe characters."""
    assert make_run_id("converge", Path("cfg/y net.yaml"), 7) == "converge-y_net-s7"
    assert make_run_id("jko", Path("a&b.yaml"), None) == "jko-a_b"
    assert make_run_id("dynamic", None, None) == "dynamic"


def test_atom_labels():
    assert make_atom_label("dst", 2) == "dst:2"
    assert atom_labels("src", 3) == ("src:0", "src:1", "src:2")
    with pytest.raises(ValueError):
        make_atom_label("mid", 0)


# config loading


def test_load_experiment_reports_position_of_schema_errors(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("command: converge\nnetwork: y\nepsilons:\n  - 0.1\n  - 0.2\np: 0.5\n", encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_experiment(path)
    message = str(info.value)
    assert "epsilons (line 4, column 3)" in message
    assert "p (line 6, column 4)" in message


def test_load_experiment_reports_yaml_syntax_position(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("command: converge\nnetwork: [y\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="line"):
        load_experiment(path)


def test_load_experiment_other_failures(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_experiment(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError, match="mapping"):
        load_experiment(write_config(tmp_path, [1, 2]))  # type: ignore[arg-type]
    with pytest.raises(ConfigError, match="does not exist"):
        load_experiment(write_config(tmp_path, {"command": "dynamic", "graph": "nowhere.json"}))


def test_load_experiment_accepts_json(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"command": "dynamic", "network": "pipe"}), encoding="utf-8")
    assert load_experiment(path).command == "dynamic"


def test_parser_requires_config():
    parser = build_parser()
    args = parser.parse_args(["dynamic", "--config", "x.yaml", "--seed", "4"])
    assert args.command == "dynamic" and args.seed == 4 and args.out is None
    with pytest.raises(SystemExit):
        parser.parse_args(["dynamic"])


# helpers


def test_fit_order_recovers_power_law():
    eps = [0.4, 0.2, 0.1, 0.05]
    assert fit_order(eps, [3 * e**2 for e in eps]) == pytest.approx(2.0)
    assert fit_order(eps, [0.0, 0.0, 0.0, 1e-3]) is None


def test_shared_corridors_counts_interior_cells():
    pts = np.zeros((4, 2))
    trajectories = [
        Trajectory((1, 2, 3, 4), pts, 0, 0, 0.5),
        Trajectory((9, 2, 3, 8), pts, 1, 1, 0.25),
        Trajectory((1, 7, 4), pts[:3], 2, 1, 0.25),
    ]
    assert shared_corridors(trajectories) == (2, 2)


def test_figure_costs_use_the_stencil_value_unpowered(figure_graph):
    tg = rasterize(figure_graph, 0.1, 0.025)
    rng = np.random.default_rng(4)
    src = cluster_measure(tg, figure_graph, ["s"], 3, 0.03, rng)
    dst = cluster_measure(tg, figure_graph, ["t1", "t2"], 3, 0.03, rng)
    pixel = figure_cost_matrix(tg, src, dst, "pixel", 2.0).values
    length = figure_cost_matrix(tg, src, dst, "length", 2.0).values
    for i, x in enumerate(src.locations):
        for j, y in enumerate(dst.locations):
            assert pixel[i, j] == pytest.approx(pixel_cost(tg, x, y), rel=1e-12)
            assert length[i, j] == pytest.approx(tube_cost(tg, x, y), rel=1e-12)


def test_figure_defaults_to_pixel_stencil():
    assert ExperimentConfig.model_validate({"command": "figure1"}).figure.metric == "pixel"


def test_build_state_validates_config(pipe):
    grid = NetworkGrid(pipe, cells_per_edge=8)
    with pytest.raises(DomainError, match="unknown node"):
        build_state(grid, StateSpec(nodes={"zz": 1.0}))
    with pytest.raises(DomainError, match="beyond edge"):
        build_state(grid, StateSpec(bump=BumpSpec(edge="e1", center=1.5)))
    state = build_state(grid, StateSpec(bump=BumpSpec(edge="e1", center=0.5), nodes={"a": 0.5}))
    assert state.gamma[grid.graph.node_index["a"]] > 0.0
    assert state.gamma[grid.graph.node_index["b"]] == 0.0
    assert state.total_mass == pytest.approx(1.0)


# commands


def test_wrong_command_and_missing_seed_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path, {"command": "dynamic", "network": "pipe"})
    assert run(cmd_jko, cfg, tmp_path / "out") == 2
    assert "configures 'dynamic'" in capsys.readouterr().err
    sampled = write_config(
        tmp_path,
        {"command": "monotonicity", "network": "y", "source": {"sample": {"n": 3}}, "target": {"sample": {"n": 3}}},
        "mono.yaml",
    )
    assert run(cmd_monotonicity, sampled, tmp_path / "out") == 2
    assert "seed" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_monotonicity_run(tmp_path):
    cfg = write_config(
        tmp_path,
        {
            "command": "monotonicity",
            "network": "y",
            "source": {"sample": {"n": 5, "edges": ["e1"]}},
            "target": {"sample": {"n": 5, "edges": ["e2", "e3"]}},
            "monotonicity": {"instances": 2},
        },
    )
    out = tmp_path / "mono"
    assert run(cmd_monotonicity, cfg, out, seed=11) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["seed"] == 11
    assert report["run_id"] == "monotonicity-exp-s11"
    assert report["violations"] == 0
    assert len(report["instances"]) == 2
    record = json.loads((out / "otresult.json").read_text())
    assert record["format"] == "otresult/1"
    assert (out / "monotonicity.csv").is_file()
    assert not list(tmp_path.glob(".mono-*"))


def test_monotonicity_run_is_reproducible(tmp_path):
    cfg = write_config(
        tmp_path,
        {"command": "monotonicity", "network": "y", "source": {"sample": {"n": 4}}, "target": {"sample": {"n": 4}}},
    )
    assert run(cmd_monotonicity, cfg, tmp_path / "a", seed=5) == 0
    assert run(cmd_monotonicity, cfg, tmp_path / "b", seed=5) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert (tmp_path / "a" / "monotonicity.csv").read_bytes() == (tmp_path / "b" / "monotonicity.csv").read_bytes()


def test_stability_run(tmp_path):
    cfg = write_config(
        tmp_path,
        {
            "command": "stability",
            "network": "square-diagonal",
            "seed": 2,
            "source": {"sample": {"n": 4, "edges": ["e1"]}},
            "target": {"sample": {"n": 4, "edges": ["e4"]}},
            "stability": {"edits": [{"remove": ["e5"]}]},
        },
    )
    out = tmp_path / "stab"
    assert run(cmd_stability, cfg, out) == 0
    (row,) = json.loads((out / "report.json").read_text())["edits"]
    assert row["ot_after"] >= row["ot_before"] - 1e-9
    assert abs(row["ot_after"] - row["ot_before"]) <= row["bound_pi"] + 1e-8
    assert row["bound_pi"] <= row["bound_inf"] + 1e-8


def test_stability_disconnecting_edit_exits_2(tmp_path):
    cfg = write_config(
        tmp_path,
        {
            "command": "stability",
            "network": "y",
            "seed": 2,
            "source": {"sample": {"n": 2, "edges": ["e1"]}},
            "target": {"sample": {"n": 2, "edges": ["e1"]}},
            "stability": {"edits": [{"remove": ["e2"]}]},
        },
    )
    assert run(cmd_stability, cfg, tmp_path / "out") == 2


def test_dynamic_run_and_solver_failure(tmp_path):
    base = {
        "command": "dynamic",
        "network": "pipe",
        "dynamic": {
            "cells_per_edge": 8,
            "steps": 4,
            "initial": {"bump": {"edge": "e1", "center": 0.3, "width": 0.15}},
            "final": {"bump": {"edge": "e1", "center": 0.6, "width": 0.15}},
            "tol": 1e-3,
        },
    }
    out = tmp_path / "dyn"
    assert run(cmd_dynamic, write_config(tmp_path, base), out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["converged"]
    assert len(report["field_sha256"]) == 64
    assert len(report["graph_sha256"]) == 64
    assert report["value"] == pytest.approx(report["static_oracle"], rel=0.25)
    for name in ("field.csv", "nodes.csv", "residuals.json"):
        assert (out / name).is_file()

    base["dynamic"]["max_iter"] = 1
    assert run(cmd_dynamic, write_config(tmp_path, base, "fail.yaml"), tmp_path / "fail") == 3
    assert not (tmp_path / "fail").exists()


def test_jko_run_with_diffusion_comparison(tmp_path):
    cfg = write_config(
        tmp_path,
        {
            "command": "jko",
            "network": "pipe",
            "transport": "static",
            "jko": {
                "cells_per_edge": 8,
                "tau": 0.01,
                "steps": 2,
                "initial": {"bump": {"edge": "e1", "center": 0.4, "width": 0.2}},
                "compare_diffusion": True,
            },
        },
    )
    out = tmp_path / "jko"
    assert run(cmd_jko, cfg, out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["energy_monotone"]
    assert report["mass_error"] <= 1e-9
    assert len(report["energies"]) == 3
    assert len(report["final_state_sha256"]) == 64
    assert report["diffusion_l1_gap"] >= 0.0
    assert (out / "energy.csv").is_file() and (out / "density.csv").is_file()


def test_figure1_run(tmp_path):
    cfg = write_config(
        tmp_path,
        {"command": "figure1", "grid_ratio": 4, "figure": {"epsilon": 0.1, "n_sources": 4, "n_targets": 4}},
    )
    out = tmp_path / "fig"
    assert run(cmd_figure1, cfg, out, seed=3) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["reconstruction"] is True
    assert report["trajectories"] >= 4
    assert report["mask_contained"]
    for name in ("figure1.svg", "figure1.csv", "mask.pgm", "mask.json"):
        assert (out / name).is_file()


def test_converge_run(tmp_path):
    cfg = write_config(
        tmp_path,
        {
            "command": "converge",
            "network": "y",
            "epsilons": [0.2, 0.1],
            "grid_ratio": 4,
            "source": {"sample": {"n": 3, "edges": ["e1"]}},
            "target": {"sample": {"n": 3, "edges": ["e2", "e3"]}},
            "converge": {"sandwich_pairs": 10},
        },
    )
    out = tmp_path / "conv"
    assert run(cmd_converge, cfg, out, seed=1) == 0
    report = json.loads((out / "report.json").read_text())
    assert [row["epsilon"] for row in report["rows"]] == [0.2, 0.1]
    for row in report["rows"]:
        assert row["abs_delta"] >= 0.0
        assert "projected_cost" in row and "sandwich_fraction" in row
    assert (out / "converge.csv").is_file()


def test_unexpected_failure_exits_1_without_output(tmp_path, monkeypatch, capsys):
    def broken(ctx):
        raise ValueError("operands could not be broadcast together")

    monkeypatch.setattr(main, "run_dynamic", broken)
    cfg = write_config(tmp_path, {"command": "dynamic", "network": "pipe"})
    assert run(cmd_dynamic, cfg, tmp_path / "out") == 1
    assert "ValueError: operands could not be broadcast" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()
    assert not list(tmp_path.glob(".out-*"))
