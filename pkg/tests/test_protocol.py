import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orcamem import protocol
from orcamem.errors import ConfigError, ValidationError
from orcamem.protocol import PulseDefaults, PulseEvent, PulseSequence

D = PulseDefaults()


def times(seq, channel):
    return [e.time for e in seq.of(channel)]


def test_rephased_timings_for_symmetric_geometry():
    seq = protocol.build_rephased(6.25, 1.0)
    assert sorted({e.time for e in seq.events}) == [0.0, 6.25, 18.75, 25.0]
    assert times(seq, "transfer") == [6.25, 18.75]
    assert seq.retrieval_times == (25.0,)
    assert seq.windows[0] == pytest.approx((25 - 0.495, 25 + 0.495))


def test_rephased_readout_is_four_T_when_r_is_one():
    for T in (2.0, 5.0, 11.0):
        assert protocol.build_rephased(T).retrieval_times == (4 * T,)


def test_rephased_shelved_interval_scales_with_inverse_ratio():
    seq = protocol.build_rephased(6.25, 1.009)
    t1, t2 = times(seq, "transfer")
    assert t2 - t1 == pytest.approx(12.3885, abs=1e-4)
    assert seq.retrieval_times[0] == pytest.approx(12.5 + 12.5 / 1.009)


@settings(max_examples=100, deadline=None)
@given(T=st.floats(1.5, 50), r=st.floats(0.5, 2.0))
def test_rephased_net_phase_vanishes_at_readout(T, r):
    seq = protocol.build_rephased(T, r)
    t1, t2 = times(seq, "transfer")
    t_read = seq.retrieval_times[0]
    assert t1 - r * (t2 - t1) + (t_read - t2) == pytest.approx(0.0, abs=1e-9)
    trace = protocol.trace_phases(seq)
    assert trace.retrievals == [(t_read, ["t=0"])]


def test_rephased_rejects_short_storage_and_bad_ratio():
    with pytest.raises(ValidationError, match="t_deph"):
        protocol.build_rephased(1.0)
    with pytest.raises(ValidationError):
        protocol.build_rephased(5.0, r=0.0)


def test_standard_protocol():
    seq = protocol.build_standard_orca(3.0)
    assert times(seq, "control") == [0.0, 3.0]
    assert not seq.of("transfer")
    assert seq.windows == ((3.0 - 0.495, 3.0 + 0.495),)
    assert protocol.build_standard_orca(0.0).windows == ()
    with pytest.raises(ValidationError):
        protocol.build_standard_orca(-1.0)


def test_four_bin_plan():
    seq = protocol.build_four_bin()
    assert times(seq, "signal") == [0.0, 4.0, 12.5, 16.5]
    assert times(seq, "transfer") == [6.25, 18.75, 31.25]
    assert seq.retrieval_times == pytest.approx((25.0, 29.0, 37.5, 41.5))
    # every bin spends exactly 25 ns in memory
    for t_in, t_out in zip(times(seq, "signal"), seq.retrieval_times):
        assert t_out - t_in == pytest.approx(25.0)
    assert protocol.validate(seq).ok


def test_multimode_amplitudes_recorded():
    amps = [1.0, 0.5, 1.0, 0.5]
    seq = protocol.build_four_bin(amplitudes=amps)
    assert [abs(a) for _, a in seq.bins] == amps
    with pytest.raises(ValidationError):
        protocol.build_four_bin(amplitudes=[1.0, 1.0])


def test_multimode_separation_rules():
    with pytest.raises(ValidationError, match="t_deph"):
        protocol.build_multimode([0.0, 0.8], [6.25, 18.75])
    report = protocol.validate(protocol.build_multimode([0.0, 2.5], [6.25, 18.75]))
    assert report.ok
    assert any("t_deph" in w for w in report.warnings)


def test_multimode_bin_that_never_rephases():
    with pytest.raises(ValidationError, match="never rephases"):
        protocol.build_multimode([0.0], [6.25])


def test_reorder_reads_later_bin_first():
    seq = protocol.build_reorder_pair(0.0, 4.0)
    trace = protocol.trace_phases(seq)
    assert [labels for _, labels in trace.retrievals] == [["t=4"], ["t=0"]]
    assert [t for t, _ in trace.retrievals] == list(seq.retrieval_times)
    with pytest.raises(ValidationError):
        protocol.build_reorder_pair(0.0, 2.0)


@pytest.mark.parametrize("r", [1.0, 1.0095])
def test_interference_mixes_both_bins_into_each_port(r):
    seq = protocol.build_interference_pair(0.0, 4.0, r=r)
    trace = protocol.trace_phases(seq)
    assert len(trace.retrievals) == 2
    for _, labels in trace.retrievals:
        assert labels == ["t=0", "t=4"]
    mix = [e for e in seq.of("transfer") if abs(e.area - math.pi / 2) < 1e-12]
    assert len(mix) == 1


def test_validator_flags_shelved_readout():
    events = [protocol.signal(0.0, D), protocol.control(0.0, D), protocol.transfer(6.25, D),
              protocol.control(12.5, D)]
    report = protocol.validate(PulseSequence(tuple(events)))
    assert any("shelved" in e for e in report.errors)
    with pytest.raises(ValidationError):
        report.raise_for_errors()


def test_validator_flags_retrieval_without_rephasing():
    events = [protocol.signal(0.0, D), protocol.control(0.0, D), protocol.control(5.0, D)]
    report = protocol.validate(PulseSequence(tuple(events)))
    assert any("no rephased coherence" in e for e in report.errors)


def test_validator_window_and_span_checks():
    seq = protocol.build_rephased(6.25)
    bad = PulseSequence(seq.events, windows=((-0.2, 0.2), (3.0, 3.0)))
    errors = protocol.validate(bad).errors
    assert any("overlaps input bin" in e for e in errors)
    assert any("empty" in e for e in errors)
    assert not protocol.validate(seq, tau_span=(0, 20)).ok


def test_transfer_parity_identity_and_swap():
    assert protocol._transfer_kind(0.0) == "identity"
    assert protocol._transfer_kind(2 * math.pi) == "identity"
    assert protocol._transfer_kind(math.pi) == "swap"
    assert protocol._transfer_kind(3 * math.pi) == "swap"
    assert protocol._transfer_kind(math.pi / 2) == "mix"
    assert protocol._transfer_kind(2 * math.pi, chirp=3.2e10) == "swap"


def test_events_sorted_and_round_trip():
    seq = protocol.build_interference_pair(0.0, 4.0, mix_phase=0.3)
    assert [e.time for e in seq.events] == sorted(e.time for e in seq.events)
    back = PulseSequence.from_dict(seq.to_dict())
    assert back == seq
    assert back.to_json() == seq.to_json()


def test_complex_fields_round_trip():
    ev = PulseEvent("signal", 1.0, 0.0, 330.0, polarization=(1 + 0j, 1j, 0j), amplitude=0.5 + 0.5j)
    assert PulseEvent.from_dict(ev.to_dict()) == ev


def test_event_validation():
    with pytest.raises(ConfigError):
        PulseEvent("pump", 0.0)
    with pytest.raises(ValidationError):
        PulseEvent("control", -1.0)
    with pytest.raises(ValidationError):
        PulseEvent("control", 0.0, fwhm=0.0)
    with pytest.raises(ConfigError):
        PulseEvent.from_dict({"channel": "control", "time": 0.0, "bogus": 1})
    with pytest.raises(ConfigError):
        PulseSequence.from_dict({"name": "x"})


def test_protocol_registry():
    assert set(protocol.PROTOCOLS) == {"standard", "rephased", "multimode", "four-bin",
                                       "reorder", "interference"}
