# featcal/scripts/__init__.py
