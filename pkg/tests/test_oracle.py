"""
Unit tests for the synthetic, replay and external-command oracles.
"""
import logging
import subprocess
from unittest.mock import Mock, patch

import numpy as np
import pytest

from arch_adapt.src.errors import ConfigViolation, OracleFailure
from arch_adapt.src.oracle import (
    CommandOracle,
    ReplayOracle,
    SyntheticAccuracyOracle,
    SyntheticDevice,
    SyntheticEnergyOracle,
    generate_lut,
    network_latency,
    synth_op_latency,
    synth_power_trace,
)
from arch_adapt.src.resource import lut_build, write_lut
from arch_adapt.src.sampler import Observation, ObservationLog, qmc_pool
from arch_adapt.src.space import HyperparamKind, OperatorKey, OpKind, decode, flops, reachable_operators


@pytest.mark.unit
class TestSyntheticAccuracy:
    """Test suite for the synthetic accuracy landscape."""

    def test_reference_gene_scores_half_saturation(self, mobile_space, mobile_accuracy):
        """Test the mid-range gene sits at the sigmoid midpoint."""
        reference = mobile_space.gene_from_unit([0.5] * mobile_space.dims)
        assert mobile_accuracy.evaluate(reference) == pytest.approx(0.45)

    def test_zero_weights_flat(self, mobile_space):
        """Test zero stage weights give saturation / 2 everywhere."""
        oracle = SyntheticAccuracyOracle(mobile_space, stage_weights=[0.0] * len(mobile_space.stages))
        for gene in qmc_pool(mobile_space, 16, seed=0):
            assert oracle.evaluate(gene) == pytest.approx(0.45)

    def test_monotone_in_channels(self, mobile_space, mobile_accuracy):
        """Test adding channels or resolution never lowers noiseless accuracy."""
        positions = mobile_space.positions(HyperparamKind.CHANNELS) + mobile_space.positions(HyperparamKind.RESOLUTION)
        for gene in qmc_pool(mobile_space, 20, seed=4):
            base = mobile_accuracy.evaluate(gene)
            for i in positions:
                hp = mobile_space.searchable[i][1]
                if gene[i] + hp.step <= hp.upper:
                    assert mobile_accuracy.evaluate(gene.replace(i, gene[i] + hp.step)) >= base

    def test_larger_networks_score_higher(self, mobile_space, mobile_accuracy):
        """Test the upper-bound gene beats the default which beats the lower-bound gene."""
        upper = mobile_space.gene_from_unit([0.999999] * mobile_space.dims)
        low = mobile_accuracy.evaluate(mobile_space.lower_gene())
        assert low < mobile_accuracy.evaluate(mobile_space.default_gene()) < mobile_accuracy.evaluate(upper)

    def test_pool_spread(self, mobile_space, mobile_accuracy):
        """Test accuracies across a pool span at least 0.3."""
        values = [mobile_accuracy.evaluate(g) for g in qmc_pool(mobile_space, 256, seed=0)]
        assert max(values) - min(values) >= 0.3
        assert all(0.0 <= v <= 0.9 for v in values)

    def test_noise_is_seeded_per_gene(self, mobile_space):
        """Test noisy values repeat exactly for the same seed and gene."""
        first = SyntheticAccuracyOracle(mobile_space, seed=7, noise_sd=0.01)
        second = SyntheticAccuracyOracle(mobile_space, seed=7, noise_sd=0.01)
        other = SyntheticAccuracyOracle(mobile_space, seed=8, noise_sd=0.01)
        gene = mobile_space.default_gene()
        assert first.evaluate(gene) == second.evaluate(gene)
        assert first.evaluate(gene) != other.evaluate(gene)

    def test_weight_count_checked(self, mobile_space):
        """Test one weight per stage is required."""
        with pytest.raises(ConfigViolation, match="stage weights"):
            SyntheticAccuracyOracle(mobile_space, stage_weights=[1.0, 2.0])

    def test_saturation_range(self, mobile_space):
        """Test saturation outside (0, 1]."""
        with pytest.raises(ConfigViolation):
            SyntheticAccuracyOracle(mobile_space, saturation=1.5)


@pytest.mark.unit
class TestSyntheticDevice:
    """Test suite for the operator-additive device model."""

    def test_dsp_staircase(self, dsp_device):
        """Test 33 and 64 output channels cost the same on the dsp profile."""
        a = OperatorKey(OpKind.CONV2D, 28, 28, 32, 33, 1, 3)
        b = OperatorKey(OpKind.CONV2D, 28, 28, 32, 64, 1, 3)
        assert synth_op_latency(dsp_device, a) == synth_op_latency(dsp_device, b)

    def test_cpu_strictly_increasing(self, cpu_device):
        """Test every added output channel costs time on the cpu profile."""
        latencies = [synth_op_latency(cpu_device, OperatorKey(OpKind.CONV2D, 28, 28, 32, c, 1, 3))
                     for c in range(8, 129)]
        assert all(b > a for a, b in zip(latencies, latencies[1:]))

    def test_flops_do_not_determine_latency(self, dsp_device):
        """Test equal-MAC operators with different dsp latencies, and the reverse."""
        narrow_in = OperatorKey(OpKind.CONV2D, 28, 28, 16, 64, 1, 1)
        square = OperatorKey(OpKind.CONV2D, 28, 28, 32, 32, 1, 1)
        assert narrow_in.in_channels * narrow_in.out_channels == square.in_channels * square.out_channels
        assert synth_op_latency(dsp_device, narrow_in) != synth_op_latency(dsp_device, square)

        small = OperatorKey(OpKind.CONV2D, 28, 28, 32, 33, 1, 1)
        large = OperatorKey(OpKind.CONV2D, 28, 28, 32, 64, 1, 1)
        assert synth_op_latency(dsp_device, small) == synth_op_latency(dsp_device, large)

    def test_spatial_slowdown(self, cpu_device):
        """Test large inputs run slower per MAC than small ones."""
        big = OperatorKey(OpKind.CONV2D, 112, 112, 16, 16, 1, 1)
        small = OperatorKey(OpKind.CONV2D, 28, 28, 256, 16, 1, 1)
        assert big.input_h * big.input_w * 16 == small.input_h * small.input_w * 256
        assert synth_op_latency(cpu_device, big) > synth_op_latency(cpu_device, small)

    def test_default_mobile_latency_scale(self, mobile_space, cpu_device):
        """Test the default mobile network lands in the tens of milliseconds."""
        latency = network_latency(cpu_device, decode(mobile_space, mobile_space.default_gene()))
        assert 10.0 < latency < 60.0

    def test_profiles(self):
        """Test the dsp profile quantizes to 32 channels and the platform id names the profile."""
        device = SyntheticDevice('dsp_like')
        assert device.channel_quantum == 32
        assert device.platform == 'synthetic-dsp_like'

    def test_unknown_profile(self):
        """Test profiles outside cpu_like and dsp_like."""
        with pytest.raises(ValueError):
            SyntheticDevice('gpu_like')


@pytest.mark.unit
class TestGenerateLut:
    """Test suite for synthetic LUT generation."""

    def test_one_record_per_reachable_operator(self, toy_space, cpu_device):
        """Test the stream covers exactly the reachable operators in order."""
        records = list(generate_lut(cpu_device, toy_space, progress=False))
        assert [key for key, _ in records] == reachable_operators(toy_space)
        assert all(latency == synth_op_latency(cpu_device, key) for key, latency in records)

    def test_regeneration_identical(self, tmp_path, toy_space, dsp_device):
        """Test two generations write byte-identical files."""
        first = write_lut(lut_build(generate_lut(dsp_device, toy_space, progress=False), dsp_device.platform),
                          tmp_path / 'a.csv')
        second = write_lut(lut_build(generate_lut(dsp_device, toy_space, progress=False), dsp_device.platform),
                           tmp_path / 'b.csv')
        assert first.read_bytes() == second.read_bytes()

    def test_dsp_lut_staircase(self, toy_space, dsp_device):
        """Test toy operators differing only in channels within one 32-bucket cost the same."""
        groups = {}
        for key, latency in generate_lut(dsp_device, toy_space, progress=False):
            bucket = (key.op_kind, key.input_h, key.input_w, (key.in_channels - 1) // 32,
                      (key.out_channels - 1) // 32, key.stride, key.kernel_size, key.expansion)
            groups.setdefault(bucket, set()).add(latency)
        assert all(len(latencies) == 1 for latencies in groups.values())


@pytest.mark.unit
class TestSyntheticEnergy:
    """Test suite for the synthetic energy oracle and power traces."""

    def test_energy_grows_with_flops(self, toy_space, cpu_device):
        """Test the larger of two genes by MACs draws more energy."""
        oracle = SyntheticEnergyOracle(toy_space, cpu_device)
        small, large = toy_space.lower_gene(), toy_space.gene_from_unit([0.999] * toy_space.dims)
        assert flops(toy_space, small) < flops(toy_space, large)
        assert 0 < oracle.evaluate(small) < oracle.evaluate(large)

    def test_noise_is_repeatable(self, toy_space):
        """Test multiplicative noise depends only on seed and gene."""
        gene = toy_space.default_gene()
        a = SyntheticEnergyOracle(toy_space, seed=3, noise_sd=0.05).evaluate(gene)
        b = SyntheticEnergyOracle(toy_space, seed=3, noise_sd=0.05).evaluate(gene)
        assert a == b != SyntheticEnergyOracle(toy_space).evaluate(gene)

    def test_trace_idle_windows_at_baseline(self):
        """Test the samples before and after the active window equal the baseline."""
        trace = synth_power_trace(20.0, baseline_current=0.3, idle_seconds=0.01, sample_interval=1e-3,
                                  run_count=5, run_seconds=0.01)
        assert np.all(trace.samples[:10] == 0.3)
        assert np.all(trace.samples[-10:] == 0.3)
        assert np.all(trace.samples[10:-10] > 0.3)

    def test_trace_arguments_checked(self):
        """Test negative energy is refused."""
        with pytest.raises(ConfigViolation):
            synth_power_trace(-1.0)


@pytest.mark.unit
class TestReplayOracle:
    """Test suite for replaying recorded measurements."""

    def test_replay_last_record_wins(self, tmp_path, toy_space):
        """Test lookups return the latest recorded value."""
        path = tmp_path / 'measured.tsv'
        gene = toy_space.default_gene()
        ObservationLog(path, toy_space).append([
            Observation(gene, 0.5, 'initial'), Observation(gene, 0.6, 'explore'),
        ])
        assert ReplayOracle(path, toy_space).evaluate(gene) == 0.6

    def test_missing_gene(self, tmp_path, toy_space, caplog):
        """Test genes absent from the log are oracle failures."""
        path = tmp_path / 'measured.tsv'
        ObservationLog(path, toy_space)
        with caplog.at_level(logging.ERROR, logger='arch_adapt.src.oracle'):
            with pytest.raises(OracleFailure, match="no measurement recorded"):
                ReplayOracle(path, toy_space).evaluate(toy_space.default_gene())
        assert 'no recorded measurement' in caplog.text


@pytest.mark.unit
class TestCommandOracle:
    """Test suite for external-program oracles."""

    @patch('arch_adapt.src.oracle.shutil.which')
    @patch('arch_adapt.src.oracle.subprocess.run')
    def test_evaluate_success(self, mock_run, mock_which, toy_space):
        """Test the gene is passed as the last argument and the last stdout line is parsed."""
        mock_which.return_value = '/usr/bin/train-one'
        mock_result = Mock()
        mock_result.stdout = "epoch 1 loss 2.3\n0.7125\n"
        mock_run.return_value = mock_result

        oracle = CommandOracle('train-one --epochs 5', timeout=60)
        gene = toy_space.default_gene()

        assert oracle.evaluate(gene) == 0.7125
        mock_which.assert_called_once_with('train-one')
        args, kwargs = mock_run.call_args
        assert args[0] == ['/usr/bin/train-one', '--epochs', '5', str(gene)]
        assert kwargs['timeout'] == 60
        assert kwargs['check'] is True

    @patch('arch_adapt.src.oracle.shutil.which')
    def test_not_installed(self, mock_which):
        """Test a command missing from PATH."""
        mock_which.return_value = None

        with pytest.raises(ConfigViolation, match="not installed"):
            CommandOracle('train-one')

    def test_empty_command(self):
        """Test an empty command line."""
        with pytest.raises(ConfigViolation, match="empty"):
            CommandOracle('')

    @patch('arch_adapt.src.oracle.shutil.which')
    @patch('arch_adapt.src.oracle.subprocess.run')
    def test_command_failure(self, mock_run, mock_which, toy_space):
        """Test a non-zero exit reports the last stderr line."""
        mock_which.return_value = '/usr/bin/train-one'
        mock_run.side_effect = subprocess.CalledProcessError(2, 'train-one', stderr="warming up\nCUDA out of memory\n")

        with pytest.raises(OracleFailure, match="status 2: CUDA out of memory"):
            CommandOracle('train-one').evaluate(toy_space.default_gene())

    @patch('arch_adapt.src.oracle.shutil.which')
    @patch('arch_adapt.src.oracle.subprocess.run')
    def test_timeout(self, mock_run, mock_which, toy_space):
        """Test a command that runs past its timeout."""
        mock_which.return_value = '/usr/bin/train-one'
        mock_run.side_effect = subprocess.TimeoutExpired('train-one', 5)

        with pytest.raises(OracleFailure, match="timed out"):
            CommandOracle('train-one', timeout=5).evaluate(toy_space.default_gene())

    @patch('arch_adapt.src.oracle.shutil.which')
    @patch('arch_adapt.src.oracle.subprocess.run')
    def test_unparseable_output(self, mock_run, mock_which, toy_space):
        """Test output without a trailing number."""
        mock_which.return_value = '/usr/bin/train-one'
        mock_result = Mock()
        mock_result.stdout = "done\n"
        mock_run.return_value = mock_result

        with pytest.raises(OracleFailure, match="could not parse"):
            CommandOracle('train-one').evaluate(toy_space.default_gene())

    @patch('arch_adapt.src.oracle.shutil.which')
    @patch('arch_adapt.src.oracle.subprocess.run')
    def test_failure_is_logged(self, mock_run, mock_which, toy_space, caplog):
        """Test a failing command is logged at error level with the gene before raising."""
        mock_which.return_value = '/usr/bin/train-one'
        mock_run.side_effect = subprocess.CalledProcessError(1, 'train-one', stderr="diverged\n")
        gene = toy_space.default_gene()

        with caplog.at_level(logging.ERROR, logger='arch_adapt.src.oracle'):
            with pytest.raises(OracleFailure):
                CommandOracle('train-one').evaluate(gene)

        assert any(r.levelno == logging.ERROR and str(gene) in r.getMessage() for r in caplog.records)
