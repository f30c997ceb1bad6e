# featcal/analysis/__init__.py
