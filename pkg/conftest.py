import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "asyncflow.settings")
django.setup()
