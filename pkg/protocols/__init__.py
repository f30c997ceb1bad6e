# featcal/protocols/__init__.py
