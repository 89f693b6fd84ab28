"""
Configuration constants for the delivery-frequency models.

Defines the variable catalogue (column kind and category for the household
survey variables), default hyper-parameters for each model family, and the
default bounded tuning domains used by randomized search.
"""

# Weekly home deliveries 0..5, class 5 means "5 or more"
N_CLASSES = 6
CLASSES = tuple(range(N_CLASSES))
LABEL_COLUMN = "deliveries"

# Default output directory for CLI artifacts
OUTPUT_DIR_ENV = "DELIVERY_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "outputs"

STRUCTURAL_ZERO_COLUMN = "Never_shop_online"

COLUMN_KINDS = ("continuous", "count", "binary", "percentage")
COLUMN_CATEGORIES = ("socioeconomic", "trip", "land_use")

# Variable catalogue: used to infer kind/category when a CSV is loaded
# without an explicit schema. Unknown columns default to continuous/socioeconomic.
VARIABLE_CATALOGUE = {
    # Socio-economic
    "HH_average_age_log": ("continuous", "socioeconomic"),
    "HH_income_log": ("continuous", "socioeconomic"),
    "HH_male_precentage": ("percentage", "socioeconomic"),
    "HH_driver_percentage": ("percentage", "socioeconomic"),
    "HH_kid_percentage": ("percentage", "socioeconomic"),
    "HH_adult_percentage": ("percentage", "socioeconomic"),
    "HH_size": ("count", "socioeconomic"),
    "HH_worker": ("count", "socioeconomic"),
    "HH_retired": ("count", "socioeconomic"),
    "HH_kids": ("count", "socioeconomic"),
    "HH_vehicles": ("count", "socioeconomic"),
    "HH_adult_manual_bikes": ("count", "socioeconomic"),
    "HH_E_bikes_scooters": ("binary", "socioeconomic"),
    "HH_income_15_39": ("binary", "socioeconomic"),
    "HH_tenure_rent": ("binary", "socioeconomic"),
    "HH_dwelling_types_aprt": ("binary", "socioeconomic"),
    "HH_worker_schedule_flex": ("binary", "socioeconomic"),
    "HH_car_share": ("binary", "socioeconomic"),
    "HH_bike_share": ("binary", "socioeconomic"),
    "Never_shop_online": ("binary", "socioeconomic"),
    "Online_grocery_membership": ("binary", "socioeconomic"),
    "Peel": ("binary", "socioeconomic"),
    "Toronto": ("binary", "socioeconomic"),
    "York": ("binary", "socioeconomic"),
    # Trip attributes (last workday)
    "HH_total_travel_distance_log": ("continuous", "trip"),
    "HH_total_trip": ("count", "trip"),
    "HH_shopping_trip": ("count", "trip"),
    # Built environment & land use
    "EPOI_Education_log": ("continuous", "land_use"),
    "EPOI_Recreation_log": ("continuous", "land_use"),
    "EPOI_Public_log": ("continuous", "land_use"),
    "EPOI_Retail_log": ("continuous", "land_use"),
    "EPOI_Health_log": ("continuous", "land_use"),
    "LU_Commercial_area_log": ("continuous", "land_use"),
    "LU_Residential_area_log": ("continuous", "land_use"),
    "LU_Park_area_log": ("continuous", "land_use"),
    "Population_density": ("continuous", "land_use"),
}

# Untuned defaults per model family. features_per_split=None means ceil(sqrt(p)).
FOREST_DEFAULTS = {
    "n_trees": 200,
    "max_depth": 12,
    "min_samples_leaf": 5,
    "features_per_split": None,
    "bootstrap_fraction": 1.0,
    "bootstrap": True,
}

GBM_DEFAULTS = {
    "n_rounds": 200,
    "learning_rate": 0.1,
    "max_depth": 4,
    "lambda_l2": 1.0,
    "gamma_split": 0.0,
    "column_subsample": 0.8,
    "min_child_weight": 1.0,
    "min_samples_leaf": 1,
}

PROBIT_DEFAULTS = {
    "max_iter": 200,
    "tolerance": 1e-6,
}

# Bounded tuning domains: [low, high] ranges (ints stay ints) or {"choices": [...]}.
# "p" as an upper bound is replaced by the feature count at search time.
FOREST_DOMAIN = {
    "n_trees": [50, 500],
    "max_depth": [3, 20],
    "min_samples_leaf": [1, 20],
    "features_per_split": [1, "p"],
}

GBM_DOMAIN = {
    "n_rounds": [50, 500],
    "learning_rate": [0.01, 0.3],
    "max_depth": [2, 8],
    "lambda_l2": [0.1, 10.0],
    "column_subsample": [0.5, 1.0],
}

PROBIT_DOMAIN = {
    "max_iter": {"choices": [200]},
}

# Model selection defaults
CV_FOLDS = 10
RFE_TOLERANCE = 0.01

# Explanation defaults
SHAP_EXACT_MAX_FEATURES = 15
SHAP_BACKGROUND_SIZE = 100
SHAP_PERMUTATIONS = 2000

# Train/test protocol
TRAIN_FRACTION = 0.7

# Default synthetic household process. Coefficients follow the ordered probit
# estimates for the significant household, mobility and land-use variables;
# thresholds put about a third of households at zero deliveries with a mean
# near 1.7 deliveries per week.
SYNTHETIC_SPEC = {
    "structural_zero_rate": 0.045,
    "thresholds": [-2.58, -1.95, -1.44, -1.03, -0.66],
    "features": {
        "HH_tenure_rent": {"distribution": "bernoulli", "p": 0.35, "beta": 0.26},
        "HH_dwelling_types_aprt": {"distribution": "bernoulli", "p": 0.30, "beta": -0.21},
        "HH_income_15_39": {"distribution": "bernoulli", "p": 0.15, "beta": -0.29},
        "HH_male_precentage": {"distribution": "uniform", "low": 0.0, "high": 1.0, "beta": -0.41},
        "HH_average_age_log": {"distribution": "normal", "mean": 3.7, "sd": 0.3, "beta": -0.50},
        "HH_worker_schedule_flex": {"distribution": "bernoulli", "p": 0.30, "beta": 0.16},
        "Online_grocery_membership": {"distribution": "bernoulli", "p": 0.25, "beta": 0.73},
        "Never_shop_online": {"distribution": "structural_zero", "beta": 0.0},
        "HH_bike_share": {"distribution": "bernoulli", "p": 0.08, "beta": 0.44},
        "HH_E_bikes_scooters": {"distribution": "bernoulli", "p": 0.05, "beta": 0.53},
        "HH_driver_percentage": {"distribution": "uniform", "low": 0.0, "high": 1.0, "beta": -0.25},
        "EPOI_Education_log": {"distribution": "normal", "mean": 2.0, "sd": 1.0, "beta": 0.14},
        "EPOI_Recreation_log": {"distribution": "normal", "mean": 1.5, "sd": 0.8, "beta": 0.09},
        "EPOI_Public_log": {"distribution": "normal", "mean": 1.2, "sd": 0.7, "beta": -0.36},
        "LU_Commercial_area_log": {"distribution": "normal", "mean": 10.0, "sd": 1.5, "beta": -0.01},
        "Peel": {"distribution": "bernoulli", "p": 0.30, "beta": -0.22},
    },
}
