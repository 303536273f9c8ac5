# Services package for simcache-lab
# Model, solver, simulation and baseline logic separated from the CLI and routes
