from hypothesis import HealthCheck, settings

# single-core CI box: no per-example deadline, moderate example counts
settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
