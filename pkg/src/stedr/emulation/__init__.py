"""Trial emulation on a synthetic claims corpus."""
from .claims import (ClaimsConfig, ClaimsDb, ClaimsPatient, DrugCatalog, generate_claims,
                     oracle_subgroup_ate, read_claims, write_claims)
from .cohort import CohortIndex, Criteria, TrialSpec, build_trial, trial_data
from .screen import DrugReport, ScreenReport, attention_summary, run_screen, write_screen
from .trial import TrialResult, emulate_trial, emulation_config
