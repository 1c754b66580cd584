from asyncflow.exceptions import UsageError
from asyncflow.experiments import build_field, load_model, pretrain_field, save_model
from asyncflow.kernel import AdamState
from asyncflow.reporting import write_csv

from ._base import AsyncflowCommand


class Command(AsyncflowCommand):
    help = "Train the conditional velocity field with the flow-matching loss and write its checkpoint"

    def add_command_arguments(self, parser):
        parser.add_argument("--resume", action="store_true", help="Continue from the existing field checkpoint")

    def run(self, config, /, **options):
        model, store = build_field(config)
        optimizer = AdamState(store, config.field.lr)
        out = self.field_dir(config)
        out.mkdir(parents=True, exist_ok=True)
        checkpoint = out / "field.ckpt"

        losses, start = [], 0
        if options.get("resume"):
            if not checkpoint.exists():
                raise UsageError(f"nothing to resume: {checkpoint} does not exist")
            meta = load_model(checkpoint, "field", store, optimizer)
            losses, start = list(meta.get("losses", [])), int(meta.get("iteration", 0))
            self.stdout.write(self.style.NOTICE(f"Resuming field training at iteration {start}"))

        def save(iteration, history):
            save_model(checkpoint, "field", config, store, optimizer, iteration=iteration, losses=history)

        result = pretrain_field(config, model, store, optimizer, losses, start, on_checkpoint=save,
                                progress=self.progress)
        save(result.iterations, result.losses)
        write_csv(out / "loss_curve.csv", ["iteration", "loss"],
                  ({"iteration": i + 1, "loss": loss} for i, loss in enumerate(result.losses)))

        final = result.losses[-1] if result.losses else float("nan")
        note = " (plateau)" if result.plateaued else ""
        self.stdout.write(self.style.SUCCESS(
            f"Field trained for {result.iterations} iterations{note}; final loss {final:.6g} -> {checkpoint}"
        ))
