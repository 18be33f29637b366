import pytest

from models import EditSpec, ExperimentConfig, GraphFile, MeasureSource, StateSpec, ValidationError

SAMPLED = {"sample": {"n": 4}}


def make_config(**overrides) -> dict:
    data = {"command": "converge", "network": "y", "epsilons": [0.2, 0.1], "source": SAMPLED, "target": SAMPLED}
    data.update(overrides)
    return data


def test_valid_converge_config() -> None:
    cfg = ExperimentConfig.model_validate(make_config(seed=3))
    assert cfg.p == 2.0
    assert cfg.variant == "kirchhoff"
    assert cfg.samples()
    assert cfg.referenced_files() == []


def test_converge_needs_epsilons() -> None:
    with pytest.raises(ValidationError, match="epsilons"):
        ExperimentConfig.model_validate(make_config(epsilons=[]))


@pytest.mark.parametrize("epsilons", [[0.1, 0.2], [0.1, 0.1], [0.2, -0.1]])
def test_epsilons_must_decrease(epsilons) -> None:
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate(make_config(epsilons=epsilons))


def test_graph_and_network_are_exclusive() -> None:
    with pytest.raises(ValidationError, match="at most one"):
        ExperimentConfig.model_validate(make_config(graph="g.json"))
    with pytest.raises(ValidationError, match="needs a 'graph'"):
        ExperimentConfig.model_validate(make_config(network=None))


def test_figure_defaults_to_builtin_network() -> None:
    cfg = ExperimentConfig.model_validate({"command": "figure1"})
    assert cfg.graph is None and cfg.network is None
    assert cfg.figure.target_nodes == ["t1", "t2"]
    assert cfg.samples()


@pytest.mark.parametrize("variant", ["kirchhoff", "reservoir-net", "reservoir-per-edge"])
def test_variant_names(variant) -> None:
    cfg = ExperimentConfig.model_validate({"command": "dynamic", "network": "pipe", "variant": variant})
    assert cfg.variant == variant
    assert not cfg.samples()


def test_unknown_variant_and_fields_rejected() -> None:
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"command": "dynamic", "network": "pipe", "variant": "reservoir-in-out"})
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"command": "dynamic", "network": "pipe", "dynamic": {"cell": 8}})


def test_measure_source_exactly_one() -> None:
    with pytest.raises(ValidationError, match="exactly one"):
        MeasureSource.model_validate({"file": "m.json", "sample": {"n": 2}})
    with pytest.raises(ValidationError, match="exactly one"):
        MeasureSource.model_validate({})


def test_stability_needs_edits() -> None:
    with pytest.raises(ValidationError, match="edits"):
        ExperimentConfig.model_validate(make_config(command="stability", epsilons=[]))
    with pytest.raises(ValidationError):
        EditSpec.model_validate({})
    cfg = ExperimentConfig.model_validate(
        make_config(command="stability", epsilons=[], stability={"random_deletions": 2}, seed=1)
    )
    assert cfg.samples()


def test_state_spec_rejects_negative_node_mass() -> None:
    with pytest.raises(ValidationError):
        StateSpec.model_validate({"nodes": {"a": -0.1}})


def test_referenced_files() -> None:
    cfg = ExperimentConfig.model_validate(
        make_config(network=None, graph="net.json", source={"file": "mu.json"}, target=SAMPLED)
    )
    assert cfg.referenced_files() == ["net.json", "mu.json"]


def test_graph_file_checks_references() -> None:
    edge = {"id": "e1", "tail": "a", "head": "b", "length": 1.0}
    assert len(GraphFile.model_validate({"nodes": ["a", "b"], "edges": [edge]}).edges) == 1
    with pytest.raises(ValidationError, match="unknown node"):
        GraphFile.model_validate({"nodes": ["a"], "edges": [edge]})
    with pytest.raises(ValidationError, match="unique"):
        GraphFile.model_validate({"nodes": ["a", "b"], "edges": [edge, edge]})
    with pytest.raises(ValidationError):
        GraphFile.model_validate({"nodes": ["a", "b"], "edges": [{**edge, "embed": [[0.0, 0.0]]}]})
