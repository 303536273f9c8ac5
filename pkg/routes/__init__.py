# Routes package for simcache-lab
