import os

os.environ['DISTUTILS_DEBUG'] = "1"

from setuptools import setup

setup(name='unloadlab',
      version = "0.1.0",
      description = "Unloaded left ventricle geometry from end-diastolic meshes",
      long_description = "Synthetic unloaded/end-diastolic left ventricle pairs from a"+\
      " Fung hyperelastic finite element model with rule-based fibers, a graph attention"+\
      " surrogate that predicts the unloaded node positions from the end-diastolic mesh"+\
      " and four global parameters, and the evaluation tools to compare it against a"+\
      " PCA baseline and the inverse finite element solve.",
      install_requires=['numpy','scipy','matplotlib','logbook'],
      extras_require={'test': ['pytest']},
      packages=['unloadlab'],
      package_dir={'unloadlab' : 'unloadlab'},
      entry_points={'console_scripts': ['unloadlab = unloadlab.cli:main']},
      license='LICENSE.txt',
      zip_safe = False,
      classifiers = [
            "Development Status :: 3 - Alpha",
            "Topic :: Scientific/Engineering",
            "Intended Audience :: Science/Research",
            "Natural Language :: English",
            "Programming Language :: Python :: 3"
            ]
      )
