# featcal/tests/__init__.py
