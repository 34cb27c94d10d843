from setuptools import setup, find_packages

setup(
    name="replicable_pglmm",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.24",
        "scipy>=1.10",
        "pandas>=2.0",
        "joblib>=1.3",
        "statsmodels>=0.14",
    ],
    extras_require={"test": ["pytest>=7.4"]},
    entry_points={
        "console_scripts": [
            "pglmm=src.main:main",
        ],
    },
)
