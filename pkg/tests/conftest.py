import pytest

from parasink import ProductSchema, Tier, WorkloadProfile, reset_imt


@pytest.fixture(autouse=True)
def _imt_clean_slate():
    """The IMT switch is sticky per epoch; give every test a fresh one."""
    reset_imt()
    yield
    reset_imt()


def make_profile(
    *,
    events_total=20,
    seed=11,
    cpu_work=0,
    reco=4,
    aod=2,
    mini=1,
    mean_bytes=512,
    dispersion=0.3,
    compressibility=0.7,
) -> WorkloadProfile:
    schemas = (
        [ProductSchema(f"reco_{i}", Tier.RECO, mean_bytes, dispersion, compressibility) for i in range(reco)]
        + [ProductSchema(f"aod_{i}", Tier.AOD, max(mean_bytes // 2, 1), dispersion, compressibility) for i in range(aod)]
        + [ProductSchema(f"mini_{i}", Tier.MINIAOD, max(mean_bytes // 4, 1), dispersion, compressibility) for i in range(mini)]
    )
    return WorkloadProfile(
        schemas=tuple(schemas), events_total=events_total, seed=seed, cpu_work_per_event=cpu_work
    )


@pytest.fixture
def tiny_profile():
    return make_profile()
