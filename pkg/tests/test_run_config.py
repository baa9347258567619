import os
import tempfile
import unittest
from unittest import mock

from app_configs import MODEL_DEFAULTS, THREADS_ENV_VAR
from src.errors import ConfigError
from src.flow_enums import AttentionKind, AttentionPosition, DatasetKind
from src.run_config import (
    RESOLVED_CONFIG_NAME,
    ModelConfig,
    RunConfig,
    load_run_config,
    parse_run_config,
    worker_threads,
)


class TestParse(unittest.TestCase):
    def test_defaults(self):
        """Test an empty file resolves to the documented defaults"""
        config = parse_run_config("")

        # Check values
        self.assertEqual(config.model.levels, MODEL_DEFAULTS["levels"])
        self.assertIs(config.model.attention, AttentionKind.NONE)
        self.assertIs(config.data.kind, DatasetKind.TOY2D_GRID)

    def test_typed_values(self):
        """Test values are converted to the type of their default"""
        config = parse_run_config(
            "[model]\nattention = isdp\nheads = 3\npure_eq6 = yes\n[train]\nlr = 1e-3\n"
        )

        # Check values
        self.assertIs(config.model.attention, AttentionKind.ISDP)
        self.assertEqual(config.model.heads, 3)
        self.assertTrue(config.model.pure_eq6)
        self.assertEqual(config.train.lr, 1e-3)

    def test_unknown_key(self):
        """Test an unknown key is a configuration error naming it"""
        with self.assertRaises(ConfigError) as ctx:
            parse_run_config("[model]\nlayers = 3\n")

        # Check the message
        self.assertIn("'layers'", str(ctx.exception))

    def test_unknown_section(self):
        """Test an unknown section is rejected"""
        with self.assertRaises(ConfigError):
            parse_run_config("[optimizer]\nlr = 1\n")

    def test_bad_values(self):
        """Test malformed numbers, enums and booleans are rejected"""
        for text in (
            "[model]\nheads = two\n",
            "[model]\nposition = pos5\n",
            "[model]\nconditional = maybe\n",
            "[train]\nlr = 0\n",
            "no section header\n",
        ):
            with self.assertRaises(ConfigError, msg=text):
                parse_run_config(text)

    def test_conditional_needs_affine(self):
        """Test conditional models with mixture coupling are rejected"""
        with self.assertRaises(ConfigError):
            parse_run_config("[model]\nconditional = true\ncoupling = mixture\n")

    def test_missing_file(self):
        """Test an unreadable configuration file exits as a configuration error"""
        with self.assertRaises(ConfigError) as ctx:
            load_run_config("/nonexistent/run.ini")

        # Check exit code
        self.assertEqual(ctx.exception.exit_code, 1)


class TestReplaceAndEcho(unittest.TestCase):
    def test_replace_accepts_enums_and_strings(self):
        """Test replace() takes enum members or their values"""
        config = ModelConfig()

        by_enum = config.replace(position=AttentionPosition.POS2)
        by_value = config.replace(position="pos2")

        # Check values
        self.assertEqual(by_enum, by_value)
        self.assertIs(by_value.position, AttentionPosition.POS2)

    def test_resolved_file_parses_back(self):
        """Test the echoed resolved configuration reproduces the run configuration"""
        config = RunConfig(
            model=ModelConfig().replace(attention="imap", levels=2, input_height=16, input_width=16)
        )

        with tempfile.TemporaryDirectory() as tmp:
            path = config.write(tmp)

            # Check name and contents
            self.assertEqual(os.path.basename(path), RESOLVED_CONFIG_NAME)
            self.assertEqual(load_run_config(path), config)


class TestWorkerThreads(unittest.TestCase):
    def test_default(self):
        """Test one worker when the variable is unset"""
        with mock.patch.dict(os.environ, {}, clear=True):
            self.assertEqual(worker_threads(), 1)

    def test_override(self):
        """Test the environment variable sets the worker cap"""
        with mock.patch.dict(os.environ, {THREADS_ENV_VAR: "4"}):
            self.assertEqual(worker_threads(), 4)

    def test_invalid(self):
        """Test a non-positive or non-integer cap is rejected"""
        for raw in ("0", "many"):
            with mock.patch.dict(os.environ, {THREADS_ENV_VAR: raw}):
                with self.assertRaises(ConfigError):
                    worker_threads()
