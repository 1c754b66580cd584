from django.apps import AppConfig
from django.conf import settings


class AsyncflowConfig(AppConfig):
    name = "asyncflow"
    verbose_name = "Asynchronous flow sampling"

    def ready(self):
        import torch

        threads = getattr(settings, "ASYNCFLOW_TORCH_THREADS", None)
        if threads:
            torch.set_num_threads(int(threads))
