# featcal/core/__init__.py
