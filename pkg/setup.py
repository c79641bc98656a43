import re
import setuptools


with open("dnrBench/__init__.py", encoding="utf-8") as f:
    version = re.search(r"__version__\s*=\s*'(\S+)'", f.read()).group(1)

setuptools.setup(
    name="dnrBench",
    version=version,
    author="dnrBench developers",
    description="Deep neural rejection against adversarial examples: "
                "multi-layer RBF SVM rejection, defense-aware attacks and security evaluation",
    long_description=open('README.md').read(),
    long_description_content_type='text/markdown',
    packages=setuptools.find_packages(exclude=['tests']),
    keywords="adversarial examples, reject option, svm, security evaluation",
    install_requires=open("requirements.txt").read().splitlines(),
    entry_points={'console_scripts': ['dnrbench=dnrBench.cli:main']},
    classifiers=[
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
    ],
    include_package_data=True,
    package_data={'': ['files/*']},
)
