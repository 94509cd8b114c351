from setuptools import find_packages, setup

with open("requirements.txt") as f:
    install_requires = [
        line.strip() for line in f if line.strip() and not line.startswith("#")
    ]

setup(
    name="fsdet",
    version="0.1.0",
    description="Meta-learning few-shot object detection with variational feature aggregation",
    packages=find_packages(include=["fsdet", "fsdet.*"]),
    python_requires=">=3.8",
    install_requires=install_requires,
    entry_points={"console_scripts": ["fsdet=fsdet.cli:main"]},
)
