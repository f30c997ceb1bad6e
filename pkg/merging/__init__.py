# featcal/merging/__init__.py
