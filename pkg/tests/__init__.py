"""lorapack test suite. Statistical suites are marked ``slow``."""
