"""
Package Setup Configurations.
"""

from setuptools import setup

import zeroshotnmt

requirements = [
    'numpy>=1.21',
    'rich>=13.3.1',
    'python-dotenv>=1.0.0',
]

with open("README.md", "r", encoding="utf-8") as fh:
    readme = fh.read()

setup(
    name='zeroshotnmt',
    version=zeroshotnmt.__version__,
    packages=['zeroshotnmt', 'zeroshotnmt.models'],
    include_package_data=True,
    license='MIT',
    description='Multilingual Transformer toolkit for studying zero-shot translation on synthetic languages.',
    long_description=readme,
    long_description_content_type="text/markdown",
    keywords=['nmt', 'transformer', 'zero-shot', 'multilingual', 'numpy'],
    install_requires=requirements,
    python_requires='>=3.8',
    entry_points={
        'console_scripts': ['zeroshotnmt=zeroshotnmt.cli:main'],
    },
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Natural Language :: English",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3.8",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Artificial Intelligence"
    ],
)
