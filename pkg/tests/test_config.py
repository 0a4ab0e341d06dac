import json
import os
import unittest
from tempfile import TemporaryDirectory

from iadalab.config import ConfigError, load_config
from iadalab.trainer import TrainConfig

EXAMPLE = """\
# desk-scale run
[domains]
d = 4
source_pi = 0.3, 0.7
target_pi = 0.45, 0.55

[train]
iterations = 200
seeds = 0, 1, 2
use_attention = no

[loss]
lambda0 = 0.05
"""


class TestConfig(unittest.TestCase):
    def _error(self, text, **kwargs):
        with self.assertRaises(ConfigError) as ctx:
            load_config(text=text, **kwargs)
        return ctx.exception

    def test_defaults_without_a_file(self):
        """It should resolve every key to its default when no file is given"""
        cfg = load_config()
        self.assertEqual(cfg.train["seeds"], (0, 1, 2, 3, 4))
        self.assertEqual(cfg.domains["source_pi"], (0.289, 0.711))
        self.assertEqual(cfg.n_classes, 2)

    def test_explicit_values_and_lines(self):
        """It should parse explicit values and remember the line of each key"""
        cfg = load_config(text=EXAMPLE)
        self.assertEqual(cfg.domains["d"], 4)
        self.assertEqual(cfg.train["seeds"], (0, 1, 2))
        self.assertIs(cfg.train["use_attention"], False)
        self.assertEqual(cfg.line_of("domains", "d"), 3)
        self.assertEqual(cfg.line_of("loss", "lambda0"), 13)
        self.assertIsNone(cfg.line_of("train", "hidden"))

    def test_load_from_file(self):
        """It should read the same document from a file path"""
        with TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, "run.cfg")
            with open(path, "w") as f:
                f.write(EXAMPLE)
            cfg = load_config(path=path)
        self.assertEqual(cfg.source, path)
        self.assertEqual(cfg.loss["lambda0"], 0.05)

    def test_missing_file(self):
        """It should report an unreadable config file as a config error"""
        self.assertEqual(self._error(None, path="/nonexistent/run.cfg").key, "<file>")

    def test_train_config_carries_loss_values(self):
        """It should build a TrainConfig with the [loss] section inside"""
        train_cfg = load_config(text=EXAMPLE).train_config()
        self.assertIsInstance(train_cfg, TrainConfig)
        self.assertEqual(train_cfg.iterations, 200)
        self.assertEqual(train_cfg.loss.lambda0, 0.05)
        self.assertIs(train_cfg.use_attention, False)

    def test_domain_specs_follow_config(self):
        """It should turn [domains] into a source/target spec pair"""
        src, tgt = load_config(text=EXAMPLE).domain_specs()
        self.assertEqual((src.d, tgt.d), (4, 4))
        self.assertEqual(tgt.pi, (0.45, 0.55))

    def test_resolved_is_json_ready(self):
        """It should expose every resolved value as plain JSON data"""
        resolved = load_config(text=EXAMPLE).resolved()
        self.assertEqual(json.loads(json.dumps(resolved))["train"]["seeds"], [0, 1, 2])
        self.assertEqual(set(resolved), {"domains", "train", "loss", "theory"})

    def test_theory_sizes(self):
        """It should parse n x d timing sizes"""
        cfg = load_config(text="[theory]\nsizes = 1000x8, 2000x16, 4000x32, 8000x64\n")
        self.assertEqual(cfg.theory["sizes"], ((1000, 8), (2000, 16), (4000, 32), (8000, 64)))

    def test_preset_supplies_target_side(self):
        """It should fill the target proportions and shift from a preset"""
        cfg = load_config(preset="ed4-ed3")
        self.assertEqual(cfg.domains["target_pi"], (0.453, 0.547))
        self.assertGreater(cfg.domains["noise_scale"], 0)

    def test_explicit_keys_win_over_preset(self):
        """It should let explicit keys override preset values"""
        cfg = load_config(text="[domains]\npreset = ed4-ed2\nn_target = 100\n")
        self.assertEqual(cfg.domains["target_pi"], (0.812, 0.188))
        self.assertEqual(cfg.domains["n_target"], 100)

    def test_command_line_preset_wins_over_file(self):
        """It should prefer the --preset argument over the file's preset"""
        cfg = load_config(text="[domains]\npreset = ed4-ed2\n", preset="ed4-ed1")
        self.assertEqual(cfg.domains["preset"], "ed4-ed1")
        self.assertEqual(cfg.domains["target_pi"], (0.666, 0.334))

    def test_seed_override_rebases_every_seed(self):
        """It should re-base domain, split and training seeds on the override"""
        cfg = load_config(text=EXAMPLE, seed_override=10)
        self.assertEqual(cfg.train["seeds"], (10, 11, 12))
        self.assertEqual((cfg.domains["source_seed"], cfg.domains["target_seed"], cfg.domains["split_seed"]),
                         (10, 11, 10))

    def test_negative_seed_override(self):
        self.assertEqual(self._error("", seed_override=-1).key, "--seed-override")

    def test_unknown_key_reports_line(self):
        """It should reject an unknown key with its line and the valid keys"""
        error = self._error("[train]\niterations = 10\nlearning_rat = 0.1\n")
        self.assertEqual((error.key, error.line), ("train.learning_rat", 3))
        self.assertIn("valid keys", str(error))

    def test_unknown_section(self):
        error = self._error("[train]\niterations = 10\n\n[model]\nhidden = 4\n")
        self.assertEqual((error.key, error.line), ("[model]", 4))

    def test_invalid_values(self):
        """It should name the key and line of every invalid value"""
        cases = [
            ("[train]\niterations = -1\n", "train.iterations", 2),
            ("[train]\n\nlearning_rate = fast\n", "train.learning_rate", 3),
            ("[train]\nthreshold_mode = adaptive\n", "train.threshold_mode", 2),
            ("[train]\nuse_attention = maybe\n", "train.use_attention", 2),
            ("[train]\nseeds = \n", "train.seeds", 2),
            ("[domains]\nsource_pi = 0.5, 0.6\n", "domains.source_pi", 2),
            ("[domains]\npreset = ed9-ed9\n", "domains.preset", 2),
            ("[loss]\nwarmup_tau = 0\n", "loss.warmup_tau", 2),
        ]
        for text, key, line in cases:
            with self.subTest(key=key):
                error = self._error(text)
                self.assertEqual((error.key, error.line), (key, line))
                self.assertIn(f"line {line}", str(error))

    def test_mismatched_class_counts(self):
        """It should reject target proportions with a different class count"""
        error = self._error("[domains]\nsource_pi = 0.3, 0.7\ntarget_pi = 0.2, 0.3, 0.5\n")
        self.assertEqual((error.key, error.line), ("domains.target_pi", 3))

    def test_batch_budget_below_class_count(self):
        text = "[domains]\nsource_pi = 0.2, 0.3, 0.5\ntarget_pi = 0.2, 0.3, 0.5\n[train]\nbatch_budget = 2\n"
        self.assertEqual(self._error(text).key, "train.batch_budget")

    def test_curvature_range(self):
        self.assertEqual(self._error("[theory]\nmu_min = 2.0\nbeta_max = 1.0\n").key, "theory.beta_max")

    def test_duplicate_key(self):
        """It should reject a key given twice in one section"""
        error = self._error("[train]\niterations = 10\niterations = 20\n")
        self.assertEqual(error.key, "iterations")
        self.assertEqual(error.line, 3)

    def test_key_outside_section(self):
        self.assertEqual(self._error("iterations = 10\n").key, "<header>")


if __name__ == "__main__":
    unittest.main()
