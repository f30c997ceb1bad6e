# featcal/pipeline/__init__.py
