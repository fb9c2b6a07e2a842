def pytest_addoption(parser):
    parser.addoption("--ml1m", default=None,
                     help="path to a MovieLens-1M ratings dump for the full-scale ingestion check")
