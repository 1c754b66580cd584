from asyncflow.experiments import load_frozen_field, run_tpm_training, save_model
from asyncflow.reporting import write_jsonl

from ._base import AsyncflowCommand


class Command(AsyncflowCommand):
    help = "Train the timestep prediction module with group-relative PPO against the frozen field"

    def add_command_arguments(self, parser):
        self.add_checkpoint_arguments(parser, tpm=False)
        parser.add_argument("--iterations", type=int, help="Override train.iterations")

    def run(self, config, /, **options):
        field = load_frozen_field(config, self.field_checkpoint(config, options))
        out = self.tpm_dir(config)
        out.mkdir(parents=True, exist_ok=True)

        def on_checkpoint(iteration, store, optimizer):
            save_model(out / f"tpm-{iteration:05d}.ckpt", "tpm", config, store, optimizer, iteration=iteration)

        def on_iteration(iteration, row):
            if self.verbosity > 1:
                self.stdout.write(
                    f"iter {iteration}: reward {row['mean_reward']:.4f} deviation {row['mean_deviation']:+.4f} "
                    f"clip {row['clip_fraction']:.3f}"
                )

        _, store, optimizer, result = run_tpm_training(
            config, field, iterations=options.get("iterations"), on_iteration=on_iteration,
            on_checkpoint=on_checkpoint, progress=self.progress,
        )
        checkpoint = save_model(out / "tpm.ckpt", "tpm", config, store, optimizer,
                                iteration=len(result.log) + len(result.skipped), skipped=result.skipped)
        write_jsonl(out / "training_log.jsonl", result.log)

        if result.skipped:
            self.stdout.write(self.style.WARNING(f"{len(result.skipped)} groups skipped after rollout failures"))
        if result.saturation_warnings:
            self.stdout.write(self.style.WARNING("Mean deviation saturated its bound; see the training log"))
        last = result.log[-1] if result.log else {}
        self.stdout.write(self.style.SUCCESS(
            f"TPM trained for {len(result.log)} iterations; last mean deviation "
            f"{last.get('mean_deviation', 0.0):+.4f} -> {checkpoint}"
        ))
