from setuptools import setup

about = {}
with open("pymimodet/_version.py") as f:
    exec(f.read(), about)

with open("README.md") as f:
    readme = f.read()

extras = {
   "test": ["pytest", "pytest-mock", "pytest-asyncio"]
}

setup(
    name="pymimodet",
    packages=["pymimodet"],
    install_requires=["numpy>=1.17.0", "scipy", "torch", "sqlitedict"],
    extras_require=extras,
    python_requires=">=3.8",
    zip_safe=True,
    version=about["__version__"],
    description="Massive MIMO detectors, learned iterative detection and SER benchmarks.",
    long_description=readme,
    long_description_content_type="text/markdown",
    keywords=["mimo", "detection", "wireless"],
    classifiers=[],
    entry_points={
        "console_scripts": ["pymimodetcommand=pymimodet.utils:pymimodetcommand"]
    },
)
