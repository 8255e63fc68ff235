# This file is intentionally left empty to mark tests as a package 