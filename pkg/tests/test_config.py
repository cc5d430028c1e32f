import math

import pytest

from orcamem import config
from orcamem.errors import ConfigError, ValidationError


def test_defaults_resolve_to_main_preset():
    cfg = config.resolve({"schema_version": 1})
    assert cfg["preset"] == "paper-main"
    assert cfg["atoms"]["temperature_K"] == pytest.approx(393.15)
    assert cfg["protocol"] == {"name": "rephased", "params": {"T": 6.25}}


@pytest.mark.parametrize("raw", [{}, {"schema_version": 2}, [1, 2], {"schema_version": 1, "preset": "lab"}])
def test_bad_documents_rejected(raw):
    with pytest.raises(ConfigError):
        config.resolve(raw)


def test_unknown_keys_rejected_at_any_depth():
    with pytest.raises(ConfigError, match="atoms.temprature_K"):
        config.preset("paper-main", atoms={"temprature_K": 300})
    with pytest.raises(ConfigError, match="must be a mapping"):
        config.preset("paper-main", solver=3)
    # hyperfine overrides are free-form
    cfg = config.preset("paper-main", atoms={"hfs": {"d": [3.0, -4.0]}})
    assert cfg["atoms"]["hfs"] == {"d": [3.0, -4.0]}


def test_presets_layer_over_base():
    appb = config.preset("paper-appB")
    assert appb["atoms"]["n_classes"] == 65
    assert appb["solver"]["tier"] == "hyperfine"
    stretched = config.preset("paper-appB-stretched")
    assert stretched["atoms"]["ground_population"] == "stretched"
    assert stretched["pulses"]["transfer_area"] == pytest.approx(3 * math.pi)


def test_load_resolves_species_relative_to_file(tmp_path):
    (tmp_path / "run.yaml").write_text("schema_version: 1\nspecies: data/rb.yaml\n")
    cfg = config.load(tmp_path / "run.yaml")
    assert cfg["species"] == str(tmp_path / "data" / "rb.yaml")
    with pytest.raises(ConfigError, match="rb.yaml"):
        config.compile_run(cfg)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        config.load(tmp_path / "absent.yaml")
    (tmp_path / "bad.yaml").write_text("schema_version: [1\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        config.load(tmp_path / "bad.yaml")


def test_sweep_axes_and_points():
    cfg = config.preset("paper-main", sweep={"axes": [
        {"path": "atoms.optical_depth", "values": [1e3, 1e4]},
        {"path": "protocol.params.T", "start": 2.0, "stop": 4.0, "num": 3},
    ]})
    points = config.sweep_points(cfg)
    assert len(points) == 6
    assert [p["atoms"]["optical_depth"] for p in points] == [1e3] * 3 + [1e4] * 3
    assert [p["protocol"]["params"]["T"] for p in points[:3]] == [2.0, 3.0, 4.0]
    assert all(p["sweep"] == {"axes": []} for p in points)


@pytest.mark.parametrize("axes", [
    [],
    [{"path": "atoms.optical_depth", "values": []}],
    [{"path": "atoms.density", "values": [1]}],
    [{"path": "atoms.optical_depth"}],
    ["atoms.optical_depth"],
])
def test_bad_sweep_axes(axes):
    with pytest.raises(ConfigError):
        config.sweep_axes(config.preset("paper-main", sweep={"axes": axes}))


def test_workers_resolution(monkeypatch):
    cfg = config.preset("paper-main")
    monkeypatch.delenv(config.WORKERS_ENV, raising=False)
    assert config.workers(cfg) == 1
    monkeypatch.setenv(config.WORKERS_ENV, "3")
    assert config.workers(cfg) == 3
    assert config.workers(cfg, 2) == 2
    with pytest.raises(ConfigError):
        config.workers(cfg, 0)
    monkeypatch.setenv(config.WORKERS_ENV, "many")
    with pytest.raises(ConfigError):
        config.workers(cfg)


def test_energy_sets_area():
    assert config.energy_to_area(3.29, 3.29) == pytest.approx(math.pi)
    assert config.energy_to_area(4 * 3.29, 3.29) == pytest.approx(2 * math.pi)
    cfg = config.preset("paper-main", pulses={"control_energy_nJ": 12.0})
    assert config.pulse_defaults(cfg).control_area == pytest.approx(math.pi * math.sqrt(12 / 3.29))


def test_compiled_main_run():
    c = config.compile_run(config.preset("paper-main", atoms={"n_classes": 5}))
    assert c.solver.wavevectors.ratio == pytest.approx(1.0095, abs=1e-4)
    assert config.dephasing_time(c.solver) == pytest.approx(1.307, abs=1e-3)
    assert c.sequence.t_deph == pytest.approx(1.307, abs=1e-3)
    t1, t2 = (e.time for e in c.sequence.of("transfer"))
    assert (t1, t2 - t1) == pytest.approx((6.25, 12.5 / c.solver.wavevectors.ratio))


def test_storage_time_parameter_sets_readout():
    cfg = config.preset("paper-appB", atoms={"n_classes": 5})
    c = config.compile_run(cfg)
    assert config.storage_time(c.sequence) == pytest.approx(20.0)
    std = config.set_path(cfg, "protocol", {"name": "standard", "params": {"storage_time": 3.0}})
    assert config.storage_time(config.compile_run(std).sequence) == pytest.approx(3.0)


@pytest.mark.parametrize("proto", [
    {"name": "rephased", "params": {}},
    {"name": "rephased", "params": {"T": 5.0, "storage_time": 20.0}},
    {"name": "rephased", "params": {"T": 5.0, "spacing": 1}},
    {"name": "teleport", "params": {}},
    {"name": "reorder", "params": {"t1": 0.0}},
])
def test_bad_protocol_sections(proto):
    cfg = config.set_path(config.preset("paper-main", atoms={"n_classes": 3}), "protocol", proto)
    with pytest.raises(ConfigError):
        config.compile_run(cfg)


def test_physically_invalid_protocol_is_a_validation_error():
    cfg = config.preset("paper-main", atoms={"n_classes": 3},
                        protocol={"name": "multimode", "params": {"bin_times": [0.0, 0.5],
                                                                  "transfer_times": [6.25, 18.75]}})
    with pytest.raises(ValidationError):
        config.compile_run(cfg)


def test_explicit_event_list():
    events = [{"channel": "signal", "time": 0.0, "area": 0.0},
              {"channel": "control", "time": 0.0, "area": 6.0},
              {"channel": "control", "time": 2.0, "area": 6.0}]
    cfg = config.preset("paper-main", atoms={"n_classes": 3}, protocol={"events": events})
    seq = config.compile_run(cfg).sequence
    assert [e.channel for e in seq.events] == ["signal", "control", "control"]


def test_decay_none_keeps_intermediate_linewidth():
    cfg = config.preset("paper-main", atoms={"n_classes": 3}, solver={"decay": "none"})
    s = config.solver_config(cfg)
    assert s.gamma_s == 0.0 and s.gamma_d == 0.0 and s.gamma_e > 0
