from asyncflow.experiments import EvaluationContext, build_async, load_frozen_field, load_trained_tpm
from asyncflow.reporting import reward_audit_rows, write_csv

from ._base import AsyncflowCommand


class Command(AsyncflowCommand):
    help = "Evaluate sync sampling, or async sampling with the TPM's Beta mode, on a fixed seed set"
    output_name = "evaluate"

    def add_command_arguments(self, parser):
        self.add_checkpoint_arguments(parser)
        parser.add_argument("--sync", action="store_true", help="Ignore any TPM and evaluate the sync sampler")
        parser.add_argument("--gamma", type=float, help="Override sampler.gamma for the async run")

    def run(self, config, /, **options):
        field = load_frozen_field(config, self.field_checkpoint(config, options))
        context = EvaluationContext(config, field)
        baseline = context.baseline()

        tpm_path = None if options.get("sync") else self.tpm_checkpoint(config, options)
        if tpm_path is not None and not options.get("tpm_checkpoint") and not tpm_path.exists():
            tpm_path = None
        if tpm_path is not None:
            tpm = load_trained_tpm(config, tpm_path)
            overrides = {} if options.get("gamma") is None else {"gamma": options["gamma"]}
            evaluation = context.run_async(tpm, build_async(config, stochastic=False, **overrides))
        else:
            evaluation = baseline

        out = self.output_dir(config, tpm_path or "sync", options.get("gamma"))
        names = list(evaluation.scores.names)
        dims = [f"y{j}" for j in range(config.target.dim)]
        write_csv(out / "samples.csv", ["sample", "label", *names, "composite", "mean_deviation", *dims],
                  evaluation.sample_rows())
        write_csv(out / "aggregate.csv", ["mode", "rollouts", *names, "composite", "mean_deviation"],
                  [evaluation.summary()])
        header, rows = reward_audit_rows(names, evaluation.scores.raw, evaluation.scores.normalized,
                                         evaluation.composite)
        write_csv(out / "reward_audit.csv", header, rows)

        self.stdout.write(self.style.SUCCESS(
            f"{evaluation.mode}: composite {evaluation.mean_composite:+.6f}, "
            f"mean deviation {evaluation.mean_deviation:+.4f} over {len(evaluation.trajectories)} rollouts -> {out}"
        ))
