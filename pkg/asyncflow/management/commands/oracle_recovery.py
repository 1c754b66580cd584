from asyncflow.experiments import load_frozen_field, oracle_recovery
from asyncflow.reporting import write_csv

from ._base import AsyncflowCommand

OUTCOME_HEADER = [
    "bound", "seed", "best_deviation", "best_reward", "tpm_reward", "reward_ratio",
    "tpm_deviation", "tpm_abs_deviation", "recovered",
]


class Command(AsyncflowCommand):
    help = ("Grid-search the best constant deviation, train TPMs with GRPO and check they recover it; "
            "optionally compare against the lifted bound")
    output_name = "oracle"

    def add_command_arguments(self, parser):
        self.add_checkpoint_arguments(parser, tpm=False)
        parser.add_argument("--seeds", type=int, nargs="+", help="Override oracle.seeds")
        parser.add_argument("--lifted", action="store_true", help="Repeat the experiment under the lifted bound")

    def run(self, config, /, **options):
        field = load_frozen_field(config, self.field_checkpoint(config, options))
        seeds = options.get("seeds") or config.oracle.seeds
        bounds = ["standard", "lifted"] if options.get("lifted") else ["standard"]

        grid_rows, outcome_rows = [], []
        abs_deviation = {}
        for bound in bounds:
            search, outcomes = oracle_recovery(config, field, seeds, bound=bound, progress=self.progress)
            grid_rows += [{"bound": bound, "deviation": d, "composite": c} for d, c in search]
            for outcome in outcomes:
                outcome_rows.append({
                    "bound": bound, "seed": outcome.seed, "best_deviation": outcome.best_deviation,
                    "best_reward": outcome.best_reward, "tpm_reward": outcome.tpm_reward,
                    "reward_ratio": outcome.reward_ratio, "tpm_deviation": outcome.tpm_deviation,
                    "tpm_abs_deviation": outcome.tpm_abs_deviation, "recovered": outcome.recovered,
                })
            recovered = sum(o.recovered for o in outcomes)
            abs_deviation[bound] = sum(o.tpm_abs_deviation for o in outcomes) / len(outcomes)
            style = self.style.SUCCESS if recovered * 3 >= 2 * len(outcomes) else self.style.WARNING
            self.stdout.write(style(
                f"{bound}: d*={outcomes[0].best_deviation:+.2f}, recovered on {recovered}/{len(outcomes)} seeds"
            ))

        out = self.output_dir(config, seeds, bounds)
        write_csv(out / "oracle_grid.csv", ["bound", "deviation", "composite"], grid_rows)
        write_csv(out / "outcomes.csv", OUTCOME_HEADER, outcome_rows)
        if len(abs_deviation) == 2:
            self.stdout.write(self.style.NOTICE(
                f"mean |deviation|: standard {abs_deviation['standard']:.4f}, lifted {abs_deviation['lifted']:.4f}"
            ))
        self.stdout.write(self.style.SUCCESS(f"Oracle recovery results -> {out}"))
