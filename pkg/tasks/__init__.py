# featcal/tasks/__init__.py
