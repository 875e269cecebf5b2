import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci",
    derandomize=True,
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")

from ekisub import problems


@pytest.fixture(scope="session")
def canonical():
    """The default experiment problem: n=8, d=12, h=6, J=5."""
    return problems.generate(problems.ProblemSpec(n=8, d=12, target_h=6, J=5, seed=42))
