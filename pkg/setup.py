from setuptools import find_packages, setup

setup(
    name="nikrecon",
    packages=find_packages(exclude=["tests"]),
    package_data={"nikrecon": ["profiles/*.toml"]},
    entry_points={"console_scripts": ["nikrecon=nikrecon.__main__:main"]},
)
