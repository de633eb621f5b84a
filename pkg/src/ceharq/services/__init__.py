"""Link components: channel, entropy coder, FEC codes and bounds."""
