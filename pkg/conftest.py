import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'HandRefiner.settings')
django.setup()
