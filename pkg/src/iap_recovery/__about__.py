# SPDX-FileCopyrightText: 2026-present mri-iap-recovery contributors
# SPDX-License-Identifier: MIT

__version__ = "0.1.0"
