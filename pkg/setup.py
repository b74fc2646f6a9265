from setuptools import find_packages, setup

__version__ = '0.1'

setup(
    name='recrank',
    version=__version__,
    description='LLM reranking of top-k recommendations, end to end',
    long_description="""""",
    keywords='recommendation reranking llm evaluation',
    packages=find_packages(exclude=['tests', 'tests.*']),
    include_package_data=True,
    install_requires=[
        'Django>=5.0',
        'numpy',
        'scipy',
        'pandas',
        'scikit-learn',
        'torch',
        'statsmodels',
        'httpx',
        'tenacity',
    ],
    python_requires='>=3.10',
    entry_points={
        'console_scripts': ['recrank=recrank.cli:run'],
    },
    classifiers=[
        'Framework :: Django',
        'Intended Audience :: Science/Research',
        'Programming Language :: Python :: 3.11',
        ],
    )
