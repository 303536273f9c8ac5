# Utilities package for simcache-lab
