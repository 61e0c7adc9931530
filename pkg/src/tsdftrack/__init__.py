"""Dense RGB-D reconstruction with randomized TSDF pose tracking."""
