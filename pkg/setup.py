from setuptools import find_packages, setup

setup(
    name="guidedtraj",
    version="0.0.1",
    python_requires=">=3.12",
    install_requires=("numpy", "scipy", "pandas", "PyYAML"),
    extras_require={
        "test": ("pytest",),
        "docs": ("sphinx", "sphinx_rtd_theme", "myst_parser"),
    },
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    entry_points={"console_scripts": ("guidedtraj = guidedtraj.cli:main",)},
)
