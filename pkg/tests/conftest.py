from hypothesis import settings

# first calls into the compiled kernels pay a one-off JIT cost
settings.register_profile("roughopt", deadline=None)
settings.load_profile("roughopt")
