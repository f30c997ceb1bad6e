# featcal/utils/__init__.py
