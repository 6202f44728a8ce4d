"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""

import os
import logging
import configparser as cfg

logger = logging.getLogger(__name__)

# loading ImageLoader configuration
loader_config = cfg.ConfigParser()
adv_loader_config = cfg.ConfigParser()

cfg_path = os.path.join(os.path.dirname(__file__), "..", "settings.ini")
with open(cfg_path) as cfg_file:
    loader_config.read_file(cfg_file)

adv_cfg_path = os.path.join(os.path.dirname(__file__), "advanced_settings.ini")
with open(adv_cfg_path) as adv_cfg_file:
    adv_loader_config.read_file(adv_cfg_file)


def _power_of_two(section, option, default, config=adv_loader_config):
    """
    Reads an integer option that must be a power of two
    Falls back to default (with a warning) on anything else
    """
    try:
        value = config[section].getint(option)
    except ValueError:
        value = None
    if value is None or value <= 0 or value & (value - 1):
        logger.warning(
            "Incorrect %s in config! Using default value %s = %d",
            option,
            option,
            default,
        )
        return default
    return value


# target
ARCH = loader_config["Target"].get("ARCH", "X64").strip().upper()
ARM_MOV32T = loader_config["Target"].getboolean("ARM_MOV32T", False)
RISCV_RELOCS = loader_config["Target"].getboolean("RISCV_RELOCS", False)

# verification
STRICT_SECTION_LAYOUT = loader_config["Verification"].getboolean(
    "STRICT_SECTION_LAYOUT", True
)

# loader
LOAD_HEADERS = loader_config["Loader"].getboolean("LOAD_HEADERS", True)

# hashing
REFUSE_OVERLAP = loader_config["Hashing"].getboolean("REFUSE_OVERLAP", True)
PAD_TRAILING = loader_config["Hashing"].getboolean("PAD_TRAILING", False)


"""advanced settings"""
MAX_SECTIONS = (
    adv_loader_config["Limits"].getint("MAX_SECTIONS")
    if adv_loader_config["Limits"].getint("MAX_SECTIONS") is not None
    else 96
)
MAX_FILE_SIZE = (
    adv_loader_config["Limits"].getint("MAX_FILE_SIZE")
    if adv_loader_config["Limits"].getint("MAX_FILE_SIZE") is not None
    else 2 ** 31
)
MAX_IMAGE_SIZE = (
    adv_loader_config["Limits"].getint("MAX_IMAGE_SIZE")
    if adv_loader_config["Limits"].getint("MAX_IMAGE_SIZE") is not None
    else 2 ** 31
)

PE_HEADER_ALIGNMENT = _power_of_two("Headers", "PE_HEADER_ALIGNMENT", 4)
TE_MAX_SECTION_ALIGNMENT = _power_of_two("Headers", "TE_MAX_SECTION_ALIGNMENT", 0x10000)

CHECK_INVARIANTS = adv_loader_config["Debug"].getboolean("CHECK_INVARIANTS", False)
TRACK_COVERAGE = adv_loader_config["Debug"].getboolean("TRACK_COVERAGE", False)
