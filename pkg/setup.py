from setuptools import setup

setup(name='mfelattice',
     version='0.1.0',
     description='Mean-field market-clearing equilibrium pricing on a recombining binomial lattice',
     author='Rizky Azmi Swandy',
     author_email='rizkyswandy@gmail.com',
     packages=['mfelattice'],
     package_dir={'mfelattice': '.'},
     package_data={'mfelattice': ['scenarios/*.json']},
     py_modules=[],
     install_requires=[
         'numpy>=1.24',
         'scipy>=1.10',
         'pandas>=1.5',
     ],
     extras_require={
         'benchmark': ['matplotlib'],
         'test': ['pytest', 'hypothesis'],
     },
     entry_points={
         'console_scripts': ['mfelattice=mfelattice.cli:main'],
     },
     classifiers=[
         'Development Status :: 3 - Alpha',
         'Intended Audience :: Science/Research',
         'Topic :: Office/Business :: Financial :: Investment',
         'Topic :: Scientific/Engineering :: Mathematics',
         'Programming Language :: Python :: 3',
         'Operating System :: OS Independent',
     ],
     python_requires='>=3.10'
)
