import os

experiment_name = "dual-branch-sam"
mlflow_tracking_uri = os.environ.get("MLFLOW_TRACKING_URI", "file:./mlruns")
log_format = "%(asctime)s,%(msecs)03d %(name)s %(levelname)s %(message)s"
log_datefmt = "%Y-%m-%d %H:%M:%S"
loss_log_name = "loss.csv"
checkpoint_name = "model.dbsm"
