import os
from dotenv import load_dotenv
from scipy import constants as sc

path_dotenv = os.getenv("SCREENING_DOTENV", os.path.join(os.path.dirname(os.path.abspath(__file__)), ".env"))
load_dotenv(path_dotenv)

path_logs = os.getenv("SCREENING_LOG_DIR", "logs")
logger_name = "screening"
max_thread_workers = int(os.getenv("SCREENING_MAX_WORKERS", 4))
max_supercell_atoms = int(os.getenv("SCREENING_MAX_SUPERCELL_ATOMS", 5000))

# units: eV, Angstrom, fs, amu, K
EV_PER_A3_TO_GPA = 160.21766208
KB_EV = sc.physical_constants["Boltzmann constant in eV/K"][0]
H_EV_S = sc.physical_constants["Planck constant in eV/Hz"][0]
# sqrt(eV / (A^2 amu)) in rad/s, divided by 2 pi and expressed in THz
EV_A2_AMU_TO_THZ = (sc.eV / (sc.angstrom ** 2 * sc.atomic_mass)) ** 0.5 / (2.0 * sc.pi) / 1.0e12
# acceleration eV/(A amu) -> A/fs^2
EV_A_AMU_TO_A_FS2 = sc.eV / (sc.angstrom * sc.atomic_mass) / sc.angstrom * 1.0e-30
# kinetic energy amu A^2/fs^2 -> eV
AMU_A2_FS2_TO_EV = sc.atomic_mass * sc.angstrom ** 2 / 1.0e-30 / sc.eV
# A^2/fs -> cm^2/s (1e-16 cm^2 * 1e15 /s)
A2_FS_TO_CM2_S = 0.1
# eV/(K A fs) -> W/(m K)
EV_K_A_FS_TO_W_MK = sc.eV / (sc.angstrom * 1.0e-15)

descriptor_defaults = {
    "n_centers": 8,
    "center_min": 0.5,
    "eta": 4.0,
    "cutoff": 5.0,
    "hidden": [16, 16],
}

phonon_defaults = {
    "amplitude": 0.01,
    "qgrid": [8, 8, 8],
    "zero_tolerance_thz": 1.0e-3,
    # largest max|D - D^H| accepted, relative to max|phi| / min mass
    "hermitian_rtol": 5.0e-2,
    "dos_points": 401,
    "dos_tail_sigmas": 8.0,
}

md_defaults = {
    "timestep": 1.0,
    "friction": 0.01,
    "max_timestep": 2.0,
    "blowup_factor": 10.0,
    "window_fraction": [0.2, 0.8],
    "max_lag_fraction": 0.25,
    "min_r_squared": 0.99,
}

relax_defaults = {
    "f_tol": 0.05,
    "max_iter": 500,
    "armijo_c": 1.0e-4,
    "shrink": 0.5,
    "hessian_scale": 70.0,
    "max_step": 0.2,
    "collapse_ratio": 0.1,
}

checkpoint_format = "screening-potential"
checkpoint_version = 1
report_schema_version = 1
