"""
Unit tests for latency lookup tables, energy predictors and power traces.
"""
import dataclasses
from concurrent.futures import ThreadPoolExecutor
from unittest.mock import patch

import numpy as np
import pytest

from arch_adapt.src import gp
from arch_adapt.src.errors import ConfigViolation, DataError, EmptyTrace, MalformedRecord, MissingOperator
from arch_adapt.src.oracle import (
    SyntheticEnergyOracle,
    generate_lut,
    network_latency_us,
    synth_op_latency,
    synth_power_trace,
)
from arch_adapt.src.resource import (
    EnergyModel,
    LatencyLUT,
    LatencyModel,
    PowerTrace,
    build_energy_predictor,
    iter_lut_records,
    lut_build,
    predict_latency,
    predict_latency_us,
    read_lut,
    read_trace,
    trace_to_energy,
    write_lut,
    write_trace,
)
from arch_adapt.src.sampler import SamplerConfig, build_predictor, qmc_pool
from arch_adapt.src.space import Architecture, OperatorKey, OpKind, decode, load_space

CONV = OperatorKey(OpKind.CONV2D, 56, 56, 16, 32, 1, 1)
POOL = OperatorKey(OpKind.AVGPOOL, 7, 7, 32, 32, 1, 7)
FC = OperatorKey(OpKind.FC, 1, 1, 32, 10, 1, 1)


def arch_of(*keys):
    return Architecture(224, tuple(keys), tuple(range(len(keys))))


@pytest.mark.unit
class TestLutBuild:
    """Test suite for LUT ingestion."""

    def test_duplicates_averaged(self):
        """Test 100 us and 200 us for one key store 150 us."""
        lut = lut_build([(CONV, 100), (CONV, 200)], platform='bench')
        assert lut[CONV] == 150
        assert lut.record_count == 1
        assert lut.platform == 'bench'

    def test_empty_input(self):
        """Test no records give an empty LUT."""
        assert lut_build([]).record_count == 0

    def test_stored_as_whole_microseconds(self):
        """Test fractional latencies round to integers of at least 1."""
        lut = lut_build([(CONV, 12.6), (FC, 0.2)])
        assert lut[CONV] == 13
        assert lut[FC] == 1

    def test_non_positive_latency(self):
        """Test a zero latency names the offending record."""
        with pytest.raises(MalformedRecord) as exc_info:
            lut_build([(CONV, 100), (FC, 0)])
        assert exc_info.value.line == 2

    def test_read_only(self):
        """Test built LUTs cannot be modified."""
        lut = lut_build([(CONV, 100)])
        with pytest.raises(TypeError):
            lut.records[FC] = 5


@pytest.mark.unit
class TestPredictLatency:
    """Test suite for additive latency prediction."""

    def test_sum_of_operators(self):
        """Test 3.0 ms and 4.5 ms operators give 7.5 ms."""
        lut = lut_build([(CONV, 3000), (FC, 4500)])
        assert predict_latency(lut, arch_of(CONV, FC)) == 7.5

    def test_repeated_operator_counted_each_time(self):
        """Test an operator appearing twice contributes twice."""
        lut = lut_build([(CONV, 250), (FC, 40)])
        assert predict_latency_us(lut, arch_of(CONV, CONV, FC)) == 540

    def test_additive_over_concatenation(self, mobile_space, cpu_device):
        """Test the default mobile gene matches a hand sum and splits additively."""
        arch = decode(mobile_space, mobile_space.default_gene())
        lut = lut_build((key, synth_op_latency(cpu_device, key)) for key in set(arch.operators))
        assert predict_latency_us(lut, arch) == sum(synth_op_latency(cpu_device, key) for key in arch.operators)
        head = Architecture(arch.resolution, arch.operators[:8], arch.stage_index[:8])
        tail = Architecture(arch.resolution, arch.operators[8:], arch.stage_index[8:])
        assert predict_latency_us(lut, head + tail) == predict_latency_us(lut, head) + predict_latency_us(lut, tail)

    def test_missing_operators_all_listed(self):
        """Test every absent operator is reported once."""
        lut = lut_build([(CONV, 100)])
        with pytest.raises(MissingOperator) as exc_info:
            predict_latency(lut, arch_of(CONV, POOL, FC, POOL))
        assert exc_info.value.keys == [POOL, FC]

    def test_empty_lut(self):
        """Test an empty LUT misses every operator."""
        with pytest.raises(MissingOperator):
            predict_latency(LatencyLUT('empty'), arch_of(CONV))

    def test_concurrent_queries(self, toy_space, cpu_device):
        """Test parallel queries agree with serial ones."""
        model = LatencyModel(lut_build(generate_lut(cpu_device, toy_space, progress=False)), toy_space)
        genes = qmc_pool(toy_space, 256, seed=3)
        with ThreadPoolExecutor(max_workers=4) as pool:
            threaded = list(pool.map(model.predict_us, genes))
        assert threaded == [model.predict_us(g) for g in genes]


@pytest.mark.unit
class TestLutFiles:
    """Test suite for the LUT file format."""

    def test_round_trip(self, tmp_path):
        """Test a written LUT reads back equal, with its platform."""
        lut = lut_build([(CONV, 100), (FC, 40), (POOL, 7)], platform='pixel-cpu')
        path = write_lut(lut, tmp_path / 'lut.csv')
        loaded = read_lut(path)
        assert loaded.platform == 'pixel-cpu'
        assert dict(loaded.records) == dict(lut.records)

    def test_platform_with_spaces(self, tmp_path):
        """Test platform ids containing spaces survive a write and read."""
        path = write_lut(lut_build([(CONV, 100)], platform='pixel 7 big core'), tmp_path / 'lut.csv')
        assert read_lut(path).platform == 'pixel 7 big core'

    def test_empty_platform(self, tmp_path):
        """Test a header without a platform id is refused."""
        path = tmp_path / 'lut.csv'
        path.write_text('#lut v1 platform=\n')
        with pytest.raises(MalformedRecord):
            iter_lut_records(path)

    def test_unconsumed_stream_holds_no_handle(self, tmp_path):
        """Test reading the header closes the file before any record is requested."""
        path = write_lut(lut_build([(CONV, 100), (FC, 40)], 'p'), tmp_path / 'lut.csv')
        opened = []

        def tracking_open(*args, **kwargs):
            fh = open(*args, **kwargs)
            opened.append(fh)
            return fh

        with patch('arch_adapt.src.resource.open', side_effect=tracking_open, create=True):
            platform, records = iter_lut_records(path)

        assert platform == 'p'
        assert opened and all(fh.closed for fh in opened)
        assert len(list(records)) == 2

    @pytest.mark.slow
    def test_large_table_round_trip(self, tmp_path):
        """Test 350,000 distinct records ingest and dump losslessly."""
        records = [
            (OperatorKey(OpKind.CONV2D, h, h, cin, cout, 1, 3), 1 + (i % 997))
            for i, (h, cin, cout) in enumerate(
                (h, cin, cout) for h in range(1, 51) for cin in range(1, 71) for cout in range(1, 101)
            )
        ]
        assert len(records) == 350_000
        first = write_lut(lut_build(records, 'bulk'), tmp_path / 'first.csv')

        loaded = read_lut(first)
        assert loaded.record_count == 350_000
        assert dict(loaded.records) == dict(records)
        second = write_lut(loaded, tmp_path / 'second.csv')
        assert first.read_bytes() == second.read_bytes()

    def test_sorted_output_is_stable(self, tmp_path):
        """Test record order does not change the file."""
        first = write_lut(lut_build([(CONV, 100), (FC, 40)], 'p'), tmp_path / 'a.csv')
        second = write_lut(lut_build([(FC, 40), (CONV, 100)], 'p'), tmp_path / 'b.csv')
        assert first.read_bytes() == second.read_bytes()

    def test_bad_header(self, tmp_path):
        """Test files without the versioned header are refused."""
        path = tmp_path / 'lut.csv'
        path.write_text('op_kind,input_h\n')
        with pytest.raises(MalformedRecord) as exc_info:
            iter_lut_records(path)
        assert exc_info.value.line == 1

    def test_bad_row_reports_line(self, tmp_path):
        """Test a short row names its line."""
        path = write_lut(lut_build([(CONV, 100)], 'p'), tmp_path / 'lut.csv')
        with open(path, 'a') as fh:
            fh.write('fc,1,1,32\n')
        with pytest.raises(MalformedRecord) as exc_info:
            read_lut(path)
        assert exc_info.value.line == 4

    def test_negative_latency_in_file(self, tmp_path):
        """Test non-positive latencies are malformed."""
        path = write_lut(lut_build([(CONV, 100)], 'p'), tmp_path / 'lut.csv')
        with open(path, 'a') as fh:
            fh.write('fc,1,1,32,10,1,1,1,-4\n')
        with pytest.raises(MalformedRecord, match="positive"):
            read_lut(path)


@pytest.mark.unit
class TestLatencyModel:
    """Test suite for space-bound latency prediction and interpolation."""

    def test_matches_device(self, toy_space, cpu_device):
        """Test LUT predictions equal the device's whole-network latency on every toy gene."""
        model = LatencyModel(lut_build(generate_lut(cpu_device, toy_space, progress=False)), toy_space)
        for gene in toy_space.enumerate_genes():
            assert model.predict_us(gene) == network_latency_us(cpu_device, decode(toy_space, gene))

    def test_stage_latency(self, toy_space, dsp_device):
        """Test per-stage latencies sum each stage's operators and add up to the network latency."""
        model = LatencyModel(lut_build(generate_lut(dsp_device, toy_space, progress=False)), toy_space)
        for gene in qmc_pool(toy_space, 50, seed=6):
            arch = decode(toy_space, gene)
            expected = [0] * len(toy_space.stages)
            for key, index in zip(arch.operators, arch.stage_index):
                expected[index] += synth_op_latency(dsp_device, key)
            assert model.stage_us(gene) == expected
            assert sum(model.stage_us(gene)) == model.predict_us(gene)

    @pytest.mark.slow
    def test_rounded_mobile_lut(self, cpu_device):
        """Test the channel-rounded mobile space stays under 350K records and covers its pool."""
        space = load_space('chamnet-mobile', round_channels=True)
        model = LatencyModel(lut_build(generate_lut(cpu_device, space, progress=False)), space)
        assert model.lut.record_count <= 350_000
        for gene in qmc_pool(space, 1000, seed=0):
            assert model.predict_us(gene) == network_latency_us(cpu_device, decode(space, gene))

    def test_bilinear_interpolation(self, mobile_space):
        """Test a missing channel pair is interpolated from its four neighbours."""
        corners = {(16, 16): 100, (32, 16): 200, (16, 32): 300, (32, 32): 400}
        records = [(OperatorKey(OpKind.CONV2D, 28, 28, a, b, 1, 1), v) for (a, b), v in corners.items()]
        model = LatencyModel(lut_build(records), mobile_space, interpolate=True)
        target = OperatorKey(OpKind.CONV2D, 28, 28, 24, 24, 1, 1)
        assert model.operator_us(arch_of(target)) == [250]

    def test_outside_grid_still_missing(self, mobile_space):
        """Test extrapolation is refused."""
        records = [(OperatorKey(OpKind.CONV2D, 28, 28, a, b, 1, 1), 100) for a in (16, 32) for b in (16, 32)]
        model = LatencyModel(lut_build(records), mobile_space, interpolate=True)
        with pytest.raises(MissingOperator):
            model.operator_us(arch_of(OperatorKey(OpKind.CONV2D, 28, 28, 48, 16, 1, 1)))

    def test_interpolation_off_by_default(self, mobile_space):
        """Test exact lookup unless interpolation is requested."""
        records = [(OperatorKey(OpKind.CONV2D, 28, 28, a, b, 1, 1), 100) for a in (16, 32) for b in (16, 32)]
        model = LatencyModel(lut_build(records), mobile_space)
        with pytest.raises(MissingOperator):
            model.operator_us(arch_of(OperatorKey(OpKind.CONV2D, 28, 28, 24, 24, 1, 1)))


@pytest.mark.unit
class TestEnergy:
    """Test suite for energy predictors and power traces."""

    def test_exploitation_refused(self, toy_space):
        """Test energy sampling with exploit_count > 0."""
        cfg = SamplerConfig(pool_size=64, initial_random=8, explore_count=4, exploit_count=4)
        with pytest.raises(ConfigViolation, match="exploration only"):
            build_energy_predictor(toy_space, SyntheticEnergyOracle(toy_space), cfg)

    @pytest.mark.integration
    def test_energy_predictor(self, tmp_path, toy_space, cpu_device):
        """Test an exploration-only GP tracks the synthetic energy oracle and round-trips."""
        oracle = SyntheticEnergyOracle(toy_space, cpu_device)
        cfg = SamplerConfig(pool_size=256, initial_random=16, explore_count=8, exploit_count=0,
                            max_total_samples=48, mse_threshold=1e-12, seed=2)
        model, observations = build_energy_predictor(toy_space, oracle, cfg, platform='synthetic-cpu_like',
                                                     progress=False)
        assert len(observations) == 48
        assert {o.source.value for o in observations} == {'initial', 'explore'}
        genes = qmc_pool(toy_space, 20, seed=50)
        truth = np.array([oracle.evaluate(g) for g in genes])
        assert np.mean(np.abs(model.predict_many(genes) - truth) / truth) < 0.1

        loaded = EnergyModel.load(model.save(tmp_path / 'energy.json'), toy_space)
        assert loaded.platform == 'synthetic-cpu_like'
        np.testing.assert_allclose(loaded.predict_many(genes), model.predict_many(genes), atol=1e-12)

    @pytest.mark.slow
    def test_exploration_only_matches_paired_run(self, toy_space, cpu_device):
        """Test exploration-only energy sampling stays within 2x the holdout MSE of explore+exploit on 9 of 10 seeds."""
        oracle = SyntheticEnergyOracle(toy_space, cpu_device)
        within = 0
        for seed in range(10):
            explore_only = SamplerConfig(pool_size=512, initial_random=16, explore_count=8, exploit_count=0,
                                         max_total_samples=64, mse_threshold=1e-12, seed=seed)
            paired = dataclasses.replace(explore_only, explore_count=4, exploit_count=4)
            energy, first = build_energy_predictor(toy_space, oracle, explore_only, progress=False)
            mixed, second = build_predictor(toy_space, oracle, paired, progress=False)

            used = {o.gene for o in first} | {o.gene for o in second}
            holdout = [g for g in qmc_pool(toy_space, 1024, seed=seed + 500) if g not in used][:300]
            truth = np.array([oracle.evaluate(g) for g in holdout])
            explore_mse = np.mean((energy.predict_many(holdout) - truth) ** 2)
            paired_mse = np.mean((gp.predict_many(mixed, toy_space.normalize(holdout))[0] - truth) ** 2)
            within += explore_mse <= 2 * paired_mse
        assert within >= 9

    def test_trace_energy(self):
        """Test 4.2 V, 1 ms samples and 10 mA above baseline for 1 s over 1 run."""
        trace = PowerTrace(4.2, 1e-3, np.full(1000, 0.11), baseline_current=0.1, run_count=1)
        assert trace_to_energy(trace) == pytest.approx(42.0)

    def test_baseline_trace_is_zero(self):
        """Test a trace at baseline carries no energy."""
        trace = PowerTrace(4.2, 1e-3, np.full(500, 0.35), baseline_current=0.35)
        assert trace_to_energy(trace) == 0.0

    def test_below_baseline_ignored(self):
        """Test dips under the baseline do not cancel excess current."""
        trace = PowerTrace(1.0, 1.0, [0.0, 2.0], baseline_current=1.0)
        assert trace_to_energy(trace) == pytest.approx(1000.0)

    def test_divided_by_runs(self):
        """Test per-inference energy divides by the run count."""
        samples = np.full(100, 1.0)
        single = trace_to_energy(PowerTrace(2.0, 0.01, samples, run_count=1))
        assert trace_to_energy(PowerTrace(2.0, 0.01, samples, run_count=4)) == pytest.approx(single / 4)

    def test_empty_trace(self):
        """Test a trace without samples."""
        with pytest.raises(EmptyTrace):
            PowerTrace(4.2, 1e-3, [])

    def test_bad_interval(self):
        """Test a non-positive sample interval."""
        with pytest.raises(DataError):
            PowerTrace(4.2, 0.0, [1.0])

    @pytest.mark.parametrize('energy_mj', [5.0, 42.0, 150.0])
    def test_synthetic_trace_recovers_energy(self, energy_mj):
        """Test noisy synthetic traces integrate back to within 0.5%."""
        trace = synth_power_trace(energy_mj, noise_sd=0.01, seed=7)
        assert trace_to_energy(trace) == pytest.approx(energy_mj, rel=0.005)

    def test_trace_file_round_trip(self, tmp_path):
        """Test trace files keep every header field and sample."""
        trace = synth_power_trace(12.0, run_count=10, run_seconds=0.01, idle_seconds=0.01)
        loaded = read_trace(write_trace(trace, tmp_path / 'trace.txt'))
        assert (loaded.voltage, loaded.sample_interval, loaded.baseline_current, loaded.run_count) == \
            (trace.voltage, trace.sample_interval, trace.baseline_current, trace.run_count)
        assert trace_to_energy(loaded) == trace_to_energy(trace)

    def test_trace_file_without_samples(self, tmp_path):
        """Test a header-only trace file."""
        path = tmp_path / 'trace.txt'
        path.write_text('#trace v1 voltage=4.2 interval=0.001 baseline=0.1 runs=1\n')
        with pytest.raises(EmptyTrace):
            read_trace(path)

    def test_trace_file_missing_field(self, tmp_path):
        """Test headers must name every field."""
        path = tmp_path / 'trace.txt'
        path.write_text('#trace v1 voltage=4.2 interval=0.001\n0.5\n')
        with pytest.raises(MalformedRecord, match="baseline, runs"):
            read_trace(path)
