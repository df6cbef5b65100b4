import os
from setuptools import setup, find_packages

with open("requirements.txt") as f:
    requirements = [line.split("#")[0].strip() for line in f
                    if line.strip() and not line.startswith("#")]

setup(
    name="eopr-synth",
    version="1.0.0",
    description="Ellipsoidal optimal recovery synthetic control with worst-case bands",
    long_description=open("README.md", encoding="utf-8").read() if os.path.exists("README.md") else "",
    long_description_content_type="text/markdown",
    packages=find_packages(include=["src", "src.*"]),
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Mathematics",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.9",
    install_requires=requirements,
    entry_points={
        "console_scripts": [
            "eopr=src.cli.app:main",
        ],
    },
    include_package_data=True,
    package_data={"": ["config.json"]},
    zip_safe=False,
)
