from asyncflow import rng as rngs
from asyncflow.experiments import (
    build_async,
    build_grid,
    build_mixture,
    build_reward_spec,
    load_frozen_field,
    load_trained_tpm,
)
from asyncflow.flowcore import Condition
from asyncflow.reporting import line_chart, trajectory_records, write_jsonl
from asyncflow.rewards import score_samples, weighted_raw
from asyncflow.sampler import sample_async, sample_sync

from ._base import AsyncflowCommand


class Command(AsyncflowCommand):
    help = "Write every step record of one seeded trajectory as JSON lines, plus a deviation-vs-step plot"
    output_name = "trajectory"

    def add_command_arguments(self, parser):
        self.add_checkpoint_arguments(parser)
        parser.add_argument("--label", type=int, default=0, help="Condition label (default 0)")
        parser.add_argument("--stochastic", action="store_true", help="Sample r instead of using the Beta mode")
        parser.add_argument("--sync", action="store_true", help="Dump the synchronous sampler instead")

    def run(self, config, /, **options):
        field = load_frozen_field(config, self.field_checkpoint(config, options))
        grid, mixture, spec = build_grid(config), build_mixture(config), build_reward_spec(config)
        condition = Condition(options["label"])
        draw = rngs.stream(config.seed, "dump", options["label"])
        guidance = config.sampler.guidance

        cfg = None
        tpm_path = None if options.get("sync") else self.tpm_checkpoint(config, options)
        if tpm_path is None:
            trajectory = sample_sync(field, grid, condition, guidance, draw)
        else:
            tpm = load_trained_tpm(config, tpm_path)
            cfg = build_async(config, stochastic=bool(options.get("stochastic")))
            trajectory = sample_async(field, tpm, grid, condition, guidance, cfg, draw)

        scores = score_samples([trajectory.sample], [condition], spec, mixture)
        trajectory.scores = dict(zip(scores.names, map(float, scores.raw[0])))
        # a single sample cannot be z-scored; the trailer carries the weighted raw score
        trajectory.reward = float(weighted_raw(scores, spec)[0])

        out = self.output_dir(config, tpm_path or "sync", options["label"], bool(options.get("stochastic")))
        write_jsonl(out / "trajectory.jsonl", trajectory_records(trajectory, cfg))
        line_chart(out / "deviation.svg", {"deviation": [(s.k, s.deviation) for s in trajectory.steps]},
                   "Per-step deviation", "step", "deviation")
        self.stdout.write(self.style.SUCCESS(
            f"Dumped {len(trajectory.steps)} steps ({trajectory.mode}) -> {out / 'trajectory.jsonl'}"
        ))
