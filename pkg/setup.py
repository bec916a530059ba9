# setup.py
from setuptools import setup, find_packages

setup(
    name="arch-adapt",
    version="0.1",
    packages=find_packages(exclude=["tests", "tests.*"]),
    package_data={"arch_adapt": ["config/spaces/*.yaml"]},
    python_requires=">=3.10",
    install_requires=[
        'numpy>=1.26,<3',
        'scipy>=1.11,<2',
        'PyYAML>=6.0,<7',
        'python-dotenv>=1.2.2,<2',
        'pytz>=2026.2',
        'tqdm>=4.67.3,<5'
    ],
    entry_points={
        "console_scripts": [
            "arch-adapt=arch_adapt.src.main:main",
        ],
    },
)
