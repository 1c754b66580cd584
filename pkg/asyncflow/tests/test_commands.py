import csv
import json
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from asyncflow.sampler import AsyncConfig, pseudo_timestep

from .factories import tiny_config_dict, write_config


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


class CommandTestCase(SimpleTestCase):
    """Shared tiny run: one pretrained field and a two-iteration TPM."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.tmp = Path(cls._tmp.name)
        cls.root = cls.tmp / "runs"
        cls.config = write_config(cls.tmp / "tiny.yaml", tiny_config_dict())
        cls.call("pretrain_field")
        cls.call("train_tpm")
        cls.field_ckpt = next(cls.root.glob("field-*/field.ckpt"))
        cls.tpm_ckpt = next(cls.root.glob("tpm-*/tpm.ckpt"))

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()
        super().tearDownClass()

    @classmethod
    def call(cls, name, config=None, out=None, **options):
        stdout = StringIO()
        call_command(name, config=str(config or cls.config), out=str(out or cls.root), verbosity=0,
                     stdout=stdout, **options)
        return stdout.getvalue()

    def fresh_out(self, name):
        path = self.tmp / name
        path.mkdir()
        return path

    def checkpoints(self):
        return {"field_checkpoint": str(self.field_ckpt), "tpm_checkpoint": str(self.tpm_ckpt)}


class PretrainFieldCommandTests(CommandTestCase):
    """pretrain_field"""

    def test_outputs(self):
        """Checkpoint, sidecar and a strictly positive loss curve are written"""
        field_dir = self.field_ckpt.parent
        self.assertTrue((field_dir / "field.ckpt.json").exists())
        rows = read_csv(field_dir / "loss_curve.csv")
        self.assertEqual(len(rows), 120)
        self.assertTrue(all(float(row["loss"]) > 0 for row in rows))

    def test_resume_matches_uninterrupted(self):
        """Stopping at 100 and resuming to 150 gives the same field as one 150-iteration run"""
        full = tiny_config_dict(field={"iterations": 150})
        short = tiny_config_dict(field={"iterations": 100})
        straight, resumed = self.fresh_out("straight"), self.fresh_out("resumed")
        self.call("pretrain_field", config=write_config(self.tmp / "full.yaml", full), out=straight)
        self.call("pretrain_field", config=write_config(self.tmp / "short.yaml", short), out=resumed)
        self.call("pretrain_field", config=write_config(self.tmp / "full-again.yaml", full), out=resumed,
                  resume=True)
        a, b = next(straight.glob("field-*")), next(resumed.glob("field-*"))
        self.assertEqual((a / "field.ckpt").read_bytes(), (b / "field.ckpt").read_bytes())
        self.assertEqual((a / "loss_curve.csv").read_bytes(), (b / "loss_curve.csv").read_bytes())

    def test_resume_without_checkpoint(self):
        """Resuming with nothing on disk is a usage error"""
        with self.assertRaises(CommandError) as ctx:
            self.call("pretrain_field", out=self.fresh_out("empty"), resume=True)
        self.assertEqual(ctx.exception.returncode, 2)


class TrainTPMCommandTests(CommandTestCase):
    """train_tpm"""

    def test_outputs(self):
        """Final and periodic checkpoints plus one log line per iteration"""
        tpm_dir = self.tpm_ckpt.parent
        self.assertTrue((tpm_dir / "tpm-00001.ckpt").exists())
        self.assertTrue((tpm_dir / "tpm-00002.ckpt").exists())
        lines = (tpm_dir / "training_log.jsonl").read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 2)
        row = json.loads(lines[0])
        for key in ("iter", "mean_reward", "mean_deviation", "clip_fraction", "grad_norm", "lr"):
            self.assertIn(key, row)
        self.assertLess(abs(row["mean_deviation"]), 0.25)

    def test_missing_field_checkpoint(self):
        """Training without a field is a usage error with exit code 2"""
        with self.assertRaises(CommandError) as ctx:
            self.call("train_tpm", field_checkpoint=str(self.tmp / "nope.ckpt"))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_unknown_config_key(self):
        """Typos in the config fail with exit code 2"""
        data = tiny_config_dict()
        data["train"]["itterations"] = 3
        with self.assertRaises(CommandError) as ctx:
            self.call("train_tpm", config=write_config(self.tmp / "typo.yaml", data))
        self.assertEqual(ctx.exception.returncode, 2)


class EvaluateCommandTests(CommandTestCase):
    """evaluate"""

    def evaluate(self, name, **options):
        out = self.fresh_out(name)
        self.call("evaluate", out=out, **options)
        return next(out.glob("evaluate-*"))

    def test_repeatable_bytes(self):
        """Two identical invocations write identical CSVs"""
        out = self.fresh_out("repeat")
        self.call("evaluate", out=out, **self.checkpoints())
        directory = next(out.glob("evaluate-*"))
        first = {name: (directory / name).read_bytes() for name in ("samples.csv", "aggregate.csv")}
        self.call("evaluate", out=out, **self.checkpoints())
        for name, blob in first.items():
            self.assertEqual((directory / name).read_bytes(), blob, name)

    def test_zero_gamma_equals_sync(self):
        """Async evaluation at gamma=0 reproduces the sync samples exactly"""
        sync = self.evaluate("sync", sync=True, field_checkpoint=str(self.field_ckpt))
        zero = self.evaluate("gamma0", gamma=0.0, **self.checkpoints())
        self.assertEqual((zero / "samples.csv").read_bytes(), (sync / "samples.csv").read_bytes())

    def test_schema(self):
        """Per-sample rows carry metrics, composite, deviation and coordinates"""
        directory = self.evaluate("schema", **self.checkpoints())
        rows = read_csv(directory / "samples.csv")
        self.assertEqual(len(rows), 8)
        self.assertEqual(list(rows[0]), ["sample", "label", "logdensity", "noise_penalty", "alignment",
                                         "neg_distance", "composite", "mean_deviation", "y0", "y1"])
        self.assertTrue((directory / "reward_audit.csv").exists())
        self.assertTrue((directory / "config.yaml").exists())


class SweepGammaCommandTests(CommandTestCase):
    """sweep_gamma"""

    def test_rows_and_plots(self):
        """One row per (gamma, seed); gamma=0 matches the sync baseline"""
        out = self.fresh_out("sweep")
        self.call("sweep_gamma", out=out, **self.checkpoints())
        directory = next(out.glob("sweep-*"))
        rows = read_csv(directory / "sweep.csv")
        self.assertEqual(len(rows), 4)
        self.assertEqual(len(list(directory.glob("sweep_*.svg"))), 6)

        sync_out = self.fresh_out("sweep-sync")
        self.call("evaluate", out=sync_out, sync=True, field_checkpoint=str(self.field_ckpt))
        aggregate = read_csv(next(sync_out.glob("evaluate-*")) / "aggregate.csv")[0]
        anchor = next(r for r in rows if float(r["gamma"]) == 0.0 and r["seed"] == "42")
        self.assertEqual(anchor["composite"], aggregate["composite"])

    def test_svg_has_no_timestamp(self):
        """Plots are byte-identical across runs"""
        out = self.fresh_out("sweep-svg")
        self.call("sweep_gamma", out=out, **self.checkpoints())
        directory = next(out.glob("sweep-*"))
        first = (directory / "sweep_composite.svg").read_bytes()
        self.call("sweep_gamma", out=out, **self.checkpoints())
        self.assertEqual((directory / "sweep_composite.svg").read_bytes(), first)

    def test_lifted_row_and_degradation(self):
        """A lifted checkpoint adds one row per seed; --degradation writes the grid and the 4x check"""
        out = self.fresh_out("sweep-extra")
        self.call("sweep_gamma", out=out, lifted_tpm_checkpoint=str(self.tpm_ckpt), degradation=True,
                  **self.checkpoints())
        directory = next(out.glob("sweep-*"))
        rows = read_csv(directory / "sweep.csv")
        self.assertEqual([r["seed"] for r in rows if r["variant"] == "lifted"], ["42", "7"])
        self.assertEqual(len(read_csv(directory / "oracle_grid.csv")), 3)
        best, far = read_csv(directory / "degradation.csv")
        self.assertEqual(float(far["deviation"]), 4.0 * float(best["deviation"]))

    def test_empty_gamma_list(self):
        """An empty gamma list is a usage error"""
        config = write_config(self.tmp / "no-gammas.yaml", tiny_config_dict(sweep={"gammas": []}))
        with self.assertRaises(CommandError) as ctx:
            self.call("sweep_gamma", config=config, **self.checkpoints())
        self.assertEqual(ctx.exception.returncode, 2)


class CompareAlternativeCommandTests(CommandTestCase):
    """compare_alternative"""

    def test_schema_and_identity(self):
        """Schema is fixed and the w=1 row equals the sync baseline"""
        out = self.fresh_out("alternative")
        self.call("compare_alternative", out=out, field_checkpoint=str(self.field_ckpt))
        rows = read_csv(next(out.glob("alternative-*")) / "comparison.csv")
        self.assertEqual(list(rows[0]), ["mode", "knob", "composite", "noise_penalty", "alignment"])
        self.assertEqual(len(rows), 1 + 2 * 3)
        sync = rows[0]
        unit = next(r for r in rows if r["mode"] == "alternative" and float(r["knob"]) == 1.0)
        self.assertEqual(sync["mode"], "sync")
        self.assertEqual((unit["composite"], unit["noise_penalty"]), (sync["composite"], sync["noise_penalty"]))

    def test_multiplier_range(self):
        """Multipliers outside [0.5, 1.5] are refused"""
        with self.assertRaises(CommandError):
            self.call("compare_alternative", field_checkpoint=str(self.field_ckpt), multipliers=[2.0])


class DumpTrajectoryCommandTests(CommandTestCase):
    """dump_trajectory"""

    def test_records(self):
        """One record per step plus a trailer; t* re-derives from the recorded ratios"""
        out = self.fresh_out("dump")
        self.call("dump_trajectory", out=out, stochastic=True, **self.checkpoints())
        directory = next(out.glob("trajectory-*"))
        records = [json.loads(line) for line in (directory / "trajectory.jsonl").read_text().splitlines()]
        steps, trailer = records[:-1], records[-1]
        self.assertEqual(trailer["type"], "trailer")
        self.assertEqual(len(steps), 10)
        cfg = AsyncConfig(gamma=trailer["gamma"], bound=trailer["bound"], sigma_min=trailer["sigma_min"])
        for step in steps:
            self.assertLessEqual(abs(step["deviation"]), cfg.deviation_bound)
            expected = pseudo_timestep(step["t_k"], step["t_next"], step["r"], cfg)
            self.assertAlmostEqual(step["t_star_next"], expected, delta=1e-12)
        self.assertTrue((directory / "deviation.svg").exists())


class OracleRecoveryCommandTests(CommandTestCase):
    """oracle_recovery"""

    def test_smoke(self):
        """Grid and outcome files are written for each seed"""
        out = self.fresh_out("oracle")
        self.call("oracle_recovery", out=out, field_checkpoint=str(self.field_ckpt))
        directory = next(out.glob("oracle-*"))
        self.assertEqual(len(read_csv(directory / "oracle_grid.csv")), 3)
        outcomes = read_csv(directory / "outcomes.csv")
        self.assertEqual([row["seed"] for row in outcomes], ["0"])
