import time

from microau.verification import run_suite


def test_component_suite_three_seeds_under_tolerance():
    results = run_suite(seeds=3)
    assert set(results) == {"led", "backbone", "efp_full_mlp", "efp_linear",
                            "reasoner_lora", "asl_through_sigmoid"}
    for name, rep in results.items():
        assert rep.ok(1e-4), f"{name}: {rep.max_rel_error:.3e}\n{rep.summary()}"
