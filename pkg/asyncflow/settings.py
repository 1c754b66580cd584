"""
Django settings for the asyncflow project.

Only the management-command and test machinery is used: there is no
database, no URL configuration and no templates.
"""
import os
from pathlib import Path

BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get("ASYNCFLOW_SECRET_KEY", "asyncflow-local-only")

DEBUG = os.environ.get("ASYNCFLOW_DEBUG", "false").lower() == "true"

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    "asyncflow.apps.AsyncflowConfig",
]

DATABASES = {}

USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# Run configuration used when a command is given no --config
ASYNCFLOW_CONFIG = os.environ.get(
    "ASYNCFLOW_CONFIG", str(BASE_DIR / "asyncflow" / "config" / "default.yaml")
)
# Overrides the config's output_dir when set
ASYNCFLOW_OUTPUT_ROOT = os.environ.get("ASYNCFLOW_OUTPUT_ROOT")
ASYNCFLOW_TORCH_THREADS = os.environ.get("ASYNCFLOW_TORCH_THREADS")

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "simple": {"format": "{levelname} {name} {message}", "style": "{"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "simple"},
    },
    "loggers": {
        "asyncflow": {
            "handlers": ["console"],
            "level": os.environ.get("ASYNCFLOW_LOG_LEVEL", "INFO"),
            "propagate": False,
        },
    },
}
