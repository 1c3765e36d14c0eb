import pytest

from capgov.harness import RunConfig, load_registry_for, run_experiment


@pytest.fixture(scope="session")
def default_config():
    return RunConfig(profile_latency=True)


@pytest.fixture(scope="session")
def registry(default_config):
    return load_registry_for(default_config)


@pytest.fixture(scope="session")
def full_run(default_config, tmp_path_factory):
    """Full shipped protocol (11 variants x 5 seeds x 200 trials), run once."""
    audit_dir = tmp_path_factory.mktemp("audit")
    result = run_experiment(default_config, audit_dir=audit_dir)
    return result
