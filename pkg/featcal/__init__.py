# featcal/featcal/__init__.py
