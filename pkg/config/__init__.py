# featcal/config/__init__.py
