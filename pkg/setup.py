# pylint: disable=missing-class-docstring
from setuptools import setup

setup()
