"""Shared runner for the test scripts

Every test_*.py file also runs standalone (`python test_inversion.py`); this
module runs its test functions and prints the summary.
"""

import sys
from typing import Callable, Dict, List, Sequence, Tuple, Union

Tests = Union[Dict[str, object], Sequence[Tuple[str, Callable]]]


def collect_tests(tests: Tests) -> List[Tuple[str, Callable]]:
    """Named test functions from a module namespace, or an explicit list."""
    if isinstance(tests, dict):
        return [(name, func) for name, func in tests.items()
                if name.startswith('test_') and callable(func)]
    return list(tests)


def run_suite(title: str, tests: Tests) -> bool:
    """Run every test, report each outcome, and return whether all passed."""
    print(f"🚀 {title} - Test Suite")
    print("=" * 60)

    results = []
    for test_name, test_func in collect_tests(tests):
        try:
            test_func()
            print(f"✅ {test_name}")
            results.append((test_name, True))
        except Exception as e:
            print(f"❌ {test_name} failed with error: {e}")
            results.append((test_name, False))

    # Summary
    print("\n" + "=" * 60)
    print("📋 TEST SUMMARY")
    print("=" * 60)
    for test_name, result in results:
        status = "✅ PASS" if result else "❌ FAIL"
        print(f"{status} {test_name}")

    passed = sum(1 for _, result in results if result)
    print(f"\n📊 Results: {passed}/{len(results)} tests passed")
    return passed == len(results)


def exit_with_results(title: str, tests: Tests) -> None:
    """Run the suite and exit with status 0 only when every test passed."""
    sys.exit(0 if run_suite(title, tests) else 1)
