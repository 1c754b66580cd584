import numpy as np

from asyncflow.exceptions import DomainError
from asyncflow.experiments import EvaluationContext, build_async, load_frozen_field, load_trained_tpm
from asyncflow.reporting import write_csv
from asyncflow.rewards import metric_condition_alignment, metric_noise_penalty
from asyncflow.sampler import constant_deviation

from ._base import AsyncflowCommand

HEADER = ["mode", "knob", "composite", "noise_penalty", "alignment"]


def _row(evaluation, mixture):
    samples = [(t.sample, t.condition) for t in evaluation.trajectories]
    return {
        "mode": evaluation.mode,
        "knob": float(evaluation.knob),
        "composite": evaluation.mean_composite,
        "noise_penalty": float(np.mean([metric_noise_penalty(y) for y, _ in samples])),
        "alignment": float(np.mean([metric_condition_alignment(y, c, mixture) for y, c in samples])),
    }


class Command(AsyncflowCommand):
    help = "Compare velocity scaling (w in [0.5, 1.5]) with async sampling at the matched deviation w - 1"
    output_name = "alternative"

    def add_command_arguments(self, parser):
        self.add_checkpoint_arguments(parser)
        parser.add_argument("--multipliers", type=float, nargs="+", help="Override alternative.multipliers")

    def run(self, config, /, **options):
        multipliers = options.get("multipliers") or config.alternative.multipliers
        if any(not 0.5 <= w <= 1.5 for w in multipliers):
            raise DomainError("velocity multipliers must lie in [0.5, 1.5]")
        field = load_frozen_field(config, self.field_checkpoint(config, options))
        context = EvaluationContext(config, field)
        mixture = context.mixture

        rows = [_row(context.baseline(), mixture)]
        base = build_async(config, gamma=1.0, bound="standard")
        for multiplier in multipliers:
            rows.append(_row(context.run_alternative(multiplier, knob=multiplier), mixture))
            policy, cfg = constant_deviation(multiplier - 1.0, base)
            rows.append(_row(context.run_async(policy, cfg, knob=multiplier - 1.0), mixture))

        tpm_path = options.get("tpm_checkpoint")
        if tpm_path:
            # the async-trained TPM reused as a learned scaler, w = 0.5 + r
            tpm = load_trained_tpm(config, tpm_path)
            evaluation = context.run_alternative(tpm)
            evaluation.mode = "alternative-tpm"
            evaluation.knob = evaluation.mean_deviation
            rows.append(_row(evaluation, mixture))

        out = self.output_dir(config, multipliers, tpm_path)
        write_csv(out / "comparison.csv", HEADER, rows)
        self.stdout.write(self.style.SUCCESS(f"Compared {len(multipliers)} multipliers -> {out / 'comparison.csv'}"))
