import os
import struct
import tempfile
import unittest
from unittest import mock

import numpy as np

from src import numkit, training
from src.data_io import toy2d_grid
from src.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    NonFiniteError,
)
from src.flow_enums import AttentionKind
from src.flow_model import build
from src.numkit import Parameter, Tensor
from src.run_config import ModelConfig, RunConfig, TrainConfig

SLOW_TESTS = os.environ.get("ATTNFLOW_SLOW_TESTS") == "1"


def _run_config(iters: int = 3, **model) -> RunConfig:
    settings = {"levels": 1, "steps": 1, "channels": 4, "attention": "isdp"}
    settings.update(model)
    return RunConfig(
        model=ModelConfig.from_mapping(settings),
        train=TrainConfig.from_mapping(
            {"iters": iters, "batch": 4, "warmup": 2, "checkpoint_every": 0, "log_every": 1}
        ),
    )


class TestOptimizer(unittest.TestCase):
    def test_first_adamax_step(self):
        """Test the first step moves each parameter by lr against its gradient sign"""
        param = Parameter("w", np.ones((1, 2, 1, 1)))
        grads = {"w": np.array([2.0, -0.5]).reshape(1, 2, 1, 1)}

        state = training.adamax_step([param], grads, training.AdamaxState(), lr=0.1)

        # Check values
        self.assertEqual(state.step, 1)
        np.testing.assert_allclose(param.data.reshape(-1), [0.9, 1.1], atol=1e-8)

    def test_non_finite_gradient(self):
        """Test a NaN gradient is reported with the parameter name and nothing is stepped"""
        first = Parameter("a", np.zeros((1, 2, 1, 1)))
        second = Parameter("w", np.ones((1, 1, 1, 1)))
        grads = {"a": np.ones((1, 2, 1, 1)), "w": np.full((1, 1, 1, 1), np.nan)}

        with self.assertRaises(NonFiniteError) as ctx:
            training.adamax_step([first, second], grads, training.AdamaxState(), 0.1)

        # Check the message
        self.assertIn("w", str(ctx.exception))

        # Check the earlier parameter kept its value
        np.testing.assert_array_equal(first.data, np.zeros((1, 2, 1, 1)))
        np.testing.assert_array_equal(second.data, np.ones((1, 1, 1, 1)))

    def test_clip_grad_norm(self):
        """Test clipping rescales all gradients by one factor"""
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}

        clipped, norm = training.clip_grad_norm(grads, 1.0)

        # Check values
        self.assertEqual(norm, 5.0)
        np.testing.assert_allclose(clipped["a"], [0.6])
        np.testing.assert_allclose(clipped["b"], [0.8])

    def test_warmup(self):
        """Test the learning rate ramps linearly over the warmup"""
        config = TrainConfig.from_mapping({"lr": 1.0, "warmup": 4})

        # Check values
        self.assertEqual(training.learning_rate(config, 0), 0.25)
        self.assertEqual(training.learning_rate(config, 10), 1.0)


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.config = _run_config()
        self.model = build(self.config.model)
        rng = np.random.default_rng(0)
        for param in self.model.parameters():
            param.assign(param.data + rng.normal(0.0, 0.05, param.shape))
        self.model.mark_initialized()
        self.state = training.AdamaxState(
            3,
            {p.name: np.full(p.shape, 0.1) for p in self.model.parameters()},
            {p.name: np.full(p.shape, 0.2) for p in self.model.parameters()},
        )
        self.raw = training.encode_checkpoint(
            training.capture(self.model, self.config, 7, self.state)
        )

    def test_restore(self):
        """Test a decoded checkpoint rebuilds the same model and optimizer state"""
        checkpoint = training.decode_checkpoint(self.raw)

        model, state = training.restore_model(checkpoint)

        # Check header fields
        self.assertEqual(checkpoint.config, self.config)
        self.assertEqual(checkpoint.iteration, 7)
        self.assertTrue(model.initialized)

        # Check parameters and moments
        for original, restored in zip(self.model.parameters(), model.parameters()):
            np.testing.assert_array_equal(original.data, restored.data)
        self.assertEqual(state.step, 3)
        np.testing.assert_array_equal(state.u["level0.step0.actnorm.bias"], self.state.u["level0.step0.actnorm.bias"])

        # Check the restored model computes the same density
        x = Tensor(np.random.default_rng(1).uniform(size=(2, 1, 8, 8)))
        with numkit.paused():
            np.testing.assert_array_equal(
                model.log_prob(x).data, self.model.log_prob(x).data
            )

    def test_file_roundtrip(self):
        """Test saving writes the file atomically and loading reads it back"""
        with tempfile.TemporaryDirectory() as tmp:
            path = training.save_checkpoint(training.decode_checkpoint(self.raw), os.path.join(tmp, "run", "c.afck"))

            # Check no temporary file is left behind
            self.assertEqual(os.listdir(os.path.dirname(path)), ["c.afck"])
            self.assertEqual(training.load_checkpoint(path).iteration, 7)

    def test_bad_magic_and_version(self):
        """Test a foreign file or a newer format version is rejected"""
        with self.assertRaises(CheckpointVersionError):
            training.decode_checkpoint(b"NOPE" + self.raw[4:])
        with self.assertRaises(CheckpointVersionError):
            training.decode_checkpoint(self.raw[:4] + struct.pack("<I", 2) + self.raw[8:])

    def test_truncated(self):
        """Test a truncated checkpoint names the offset it stopped at"""
        with self.assertRaises(CheckpointTruncatedError) as ctx:
            training.decode_checkpoint(self.raw[:-3])

        # Check the message and exit code
        self.assertIn("offset", str(ctx.exception))
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_trailing_bytes(self):
        """Test bytes after the last tensor are rejected"""
        with self.assertRaises(CheckpointError):
            training.decode_checkpoint(self.raw + b"\x00")

    def test_missing_tensor(self):
        """Test restoring with a parameter missing is a shape error"""
        checkpoint = training.decode_checkpoint(self.raw)
        del checkpoint.tensors["level0.step0.actnorm.bias"]

        with self.assertRaises(CheckpointShapeError):
            training.restore_model(checkpoint)

    def test_config_mismatch(self):
        """Test parameters saved for another architecture do not load"""
        checkpoint = training.decode_checkpoint(self.raw)
        checkpoint.config = _run_config(channels=8)

        with self.assertRaises(CheckpointShapeError):
            training.restore_model(checkpoint)


class TestTrainingLoop(unittest.TestCase):
    def setUp(self):
        self.dataset = toy2d_grid("checker-density", 8, 32, seed=0)
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_minibatch_is_seeded(self):
        """Test a minibatch depends only on the seed and iteration"""
        first, _ = training.minibatch(self.dataset, 4, 0, 5)
        again, _ = training.minibatch(self.dataset, 4, 0, 5)
        other, _ = training.minibatch(self.dataset, 4, 0, 6)

        # Check values
        np.testing.assert_array_equal(first.data, again.data)
        self.assertFalse(np.array_equal(first.data, other.data))

    def test_outputs(self):
        """Test a short run writes metrics, the resolved config, a checkpoint and a loss curve"""
        config = _run_config()

        result = training.train(build(config.model), self.dataset, config, self.tmp.name)

        # Check values
        self.assertEqual(result.metrics["iter"].tolist(), [1, 2, 3])
        self.assertTrue(np.isfinite(result.metrics["nll"]).all())
        for name in ("metrics.csv", "config.resolved.ini", "checkpoint.afck", "loss_curve.html"):
            self.assertTrue(os.path.exists(os.path.join(self.tmp.name, name)), name)

    def test_sample_grids_at_checkpoints(self):
        """Test a sample grid and a checkpoint are written at every checkpoint interval"""
        config = _run_config(iters=4)
        config = RunConfig(model=config.model, train=config.train.replace(checkpoint_every=2))

        training.train(build(config.model), self.dataset, config, self.tmp.name)

        # Check values
        for iteration in (2, 4):
            self.assertTrue(os.path.exists(os.path.join(self.tmp.name, f"samples_iter{iteration}.pgm")))
            self.assertTrue(os.path.exists(os.path.join(self.tmp.name, f"checkpoint-iter{iteration}.afck")))

    def test_resume_is_bit_identical(self):
        """Test training 2 + 2 iterations from a checkpoint equals 4 straight iterations"""
        straight = build(_run_config().model)
        training.train(straight, self.dataset, _run_config(iters=4))

        first = training.train(build(_run_config().model), self.dataset, _run_config(iters=2))
        resumed, _ = training.restore_model(
            training.decode_checkpoint(training.encode_checkpoint(first.checkpoint))
        )
        training.train(resumed, self.dataset, _run_config(iters=4), resume=first.checkpoint)

        # Check values
        for a, b in zip(straight.parameters(), resumed.parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=a.name)

    def test_last_good_checkpoint(self):
        """Test a non-finite loss leaves the state before the failing iteration"""
        config = _run_config()
        model = build(config.model)

        with mock.patch.object(model, "mean_nll", side_effect=NonFiniteError("loss is NaN")):
            with self.assertRaises(NonFiniteError):
                training.train(model, self.dataset, config, self.tmp.name)

        # Check values
        checkpoint = training.load_checkpoint(os.path.join(self.tmp.name, training.LAST_GOOD_CHECKPOINT))
        self.assertEqual(checkpoint.iteration, 0)

    @unittest.skipUnless(SLOW_TESTS, "set ATTNFLOW_SLOW_TESTS=1 to run")
    def test_loss_decreases(self):
        """Test training lowers the NLL on a toy density for each attention kind"""
        for attention in AttentionKind:
            config = RunConfig(
                model=ModelConfig.from_mapping({"levels": 2, "steps": 2, "attention": attention}),
                train=TrainConfig.from_mapping({"iters": 200, "batch": 16, "warmup": 20, "checkpoint_every": 0}),
            )

            metrics = training.train(build(config.model), self.dataset, config).metrics

            # Check the last window beats the first
            self.assertLess(metrics["nll"].tail(20).mean(), metrics["nll"].head(20).mean(), attention.value)
