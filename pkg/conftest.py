"""Configure Django before pytest collects the sceneflow test modules."""
import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "flowsite.settings")
django.setup()
